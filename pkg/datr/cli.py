import os
import logging

from datr import build_arg_parser
from datr.utils import configure_colored_logging


logger = logging.getLogger('datr')


def _train_config(args):
    from datr.self_training import TrainConfig

    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {
        'seed': args.seed,
        'burn_in_epochs': args.burn_in_epochs,
        'mutual_epochs': args.mutual_epochs,
        'pseudo_threshold': args.pseudo_threshold,
        'batch_size': args.batch_size,
        'lr': args.lr,
    }
    for name in ('use_backbone_align', 'use_cpa', 'use_das', 'use_self_training', 'cpa_filter'):
        overrides[name] = getattr(args, name, None)
    return config.override(**overrides)


def gen_data(args):
    from datr.synthetic_domains import build_benchmark

    benchmark = build_benchmark(args.out_dir, n_train=args.n_train, n_val=args.n_val,
                                seed=args.seed, fog_preset=args.fog_preset)
    for name, manifest in benchmark._asdict().items():
        logger.info("{}: {} images -> {}".format(name, len(manifest), manifest.annotation_file))
    return 0


def run_train(args):
    from datr.self_training import train
    from datr.synthetic_domains import load_benchmark

    config = _train_config(args)
    result = train(config, load_benchmark(args.data_dir), args.out_dir, resume=args.resume)
    logger.info("Final checkpoint: {}".format(result.checkpoint))
    return 0


def run_eval(args):
    from datr.evaluation import evaluate_map, export_query_features
    from datr.synthetic_domains import load_benchmark
    from datr.utils.mutils import file_digest, load_model
    from datr.utils.plotting import plot_confidence_histogram, plot_pr_curves

    model, state = load_model(args.checkpoint, use_teacher=args.use_teacher)
    benchmark = load_benchmark(args.data_dir)
    domains = ('source', 'target') if args.domain == 'both' else (args.domain,)
    checkpoint_id = "{}@{}".format(os.path.basename(args.checkpoint), file_digest(args.checkpoint)[:12])
    weights = 'teacher' if args.use_teacher else 'student'

    for domain in domains:
        report = evaluate_map(model, getattr(benchmark, '{}_val'.format(domain)),
                              iou_threshold=args.iou_threshold, score_floor=args.score_floor,
                              fingerprint=state['fingerprint'], checkpoint=checkpoint_id,
                              keep_curves=args.plot_dir is not None)
        if args.report is None:
            report_path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                       'eval_{}_{}.json'.format(weights, domain))
        elif len(domains) == 1:
            report_path = args.report
        else:
            stem, ext = os.path.splitext(args.report)
            report_path = '{}_{}{}'.format(stem, domain, ext or '.json')
        report.to_json(report_path)
        logger.info("{} val mAP@{}: {:.2f} -> {}".format(domain, args.iou_threshold, 100 * report.mAP, report_path))
        if args.plot_dir:
            plot_pr_curves(report.curves, report.per_class_ap,
                           os.path.join(args.plot_dir, 'pr_{}_{}.png'.format(weights, domain)),
                           title='{} val, {} weights'.format(domain, weights))

    if args.plot_dir:
        features = export_query_features(model, [benchmark.target_val],
                                         os.path.join(args.plot_dir, 'target_query_features.csv'))
        threshold = state['config'].get('pseudo_threshold', 0.3)
        plot_confidence_histogram(features['score'].values,
                                  os.path.join(args.plot_dir, 'confidence_{}_target.png'.format(weights)),
                                  th=threshold)
    return 0


def run_ablate(args):
    from datr.ablation import run_ablation
    from datr.synthetic_domains import load_benchmark

    run_ablation(_train_config(args), load_benchmark(args.data_dir), args.out_dir, table=args.table)
    return 0


def run_export(args):
    from datr.evaluation import export_query_features
    from datr.synthetic_domains import load_benchmark
    from datr.utils.mutils import load_model

    model, _ = load_model(args.checkpoint, use_teacher=args.use_teacher)
    benchmark = load_benchmark(args.data_dir)
    export_query_features(model, [benchmark.source_val, benchmark.target_val], args.output,
                          max_images=args.max_images)
    return 0


COMMANDS = {
    'gen-data': gen_data,
    'train': run_train,
    'eval': run_eval,
    'ablate': run_ablate,
    'export-features': run_export,
}


def main(argv=None):
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage()
        return 2

    configure_colored_logging(logger, 'debug' if args.debug else 'info')
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as e:
        logger.error("{} failed: {}".format(args.command, e))
        logger.debug("Traceback", exc_info=True)
        return 1
