import logging
import argparse

logger = logging.getLogger(__name__)

FOG_PRESET_NAMES = ('none', 'light', 'heavy')
CPA_FILTER_NAMES = ('none', 'confidence', 'matching')
ABLATION_TABLE_NAMES = ('components', 'cpa-variants', 'thresholds')


def _add_verbosity_options(parser):
    verbosity_group = parser.add_argument_group('Verbosity Options')
    verbosity_group.add_argument('-v', "--verbose", action='store_true')
    verbosity_group.add_argument('-d', "--debug", action='store_true',
                                 help="set verbosity to debug")


def _add_schedule_options(parser):
    group = parser.add_argument_group('Training Options (override --config)')
    group.add_argument('--config', default=None,
                       help='JSON file with TrainConfig fields')
    group.add_argument('--seed', type=int, default=None,
                       help="Random seed")
    group.add_argument('--burn-in-epochs', type=int, default=None)
    group.add_argument('--mutual-epochs', type=int, default=None)
    group.add_argument('--pseudo-threshold', type=float, default=None,
                       help='teacher score needed to keep a pseudo-label')
    group.add_argument('--batch-size', type=int, default=None,
                       help='images per domain per step')
    group.add_argument('--lr', type=float, default=None)
    return group


def build_arg_parser():
    parser = argparse.ArgumentParser('datr',
                                     description='Domain adaptive detection transformer on a synthetic '
                                                 'clear-to-fog benchmark')
    subparsers = parser.add_subparsers(dest='command', metavar='command')

    gen = subparsers.add_parser('gen-data', help='render the synthetic source/target benchmark')
    gen_group = gen.add_argument_group('Benchmark Options')
    gen_group.add_argument('--out', '--out-dir', dest='out_dir', default="./data/fog",
                           help='benchmark root directory')
    gen_group.add_argument('--n-train', type=int, default=800,
                           help='training images per domain')
    gen_group.add_argument('--n-val', type=int, default=200,
                           help='validation images per domain')
    gen_group.add_argument('--seed', type=int, default=0)
    gen_group.add_argument('--fog-preset', default='heavy', choices=FOG_PRESET_NAMES)
    _add_verbosity_options(gen)

    tr = subparsers.add_parser('train', help='burn-in then mutual learning')
    tr.add_argument('--data-dir', default="./data/fog", help='benchmark root directory')
    tr.add_argument('--out-dir', default="./runs/datr", help='run directory')
    tr.add_argument('--resume', default=None, help='checkpoint to continue from')
    group = _add_schedule_options(tr)
    group.add_argument('--no-backbone-align', dest='use_backbone_align', action='store_const', const=False)
    group.add_argument('--no-cpa', dest='use_cpa', action='store_const', const=False)
    group.add_argument('--no-das', dest='use_das', action='store_const', const=False)
    group.add_argument('--no-self-training', dest='use_self_training', action='store_const', const=False)
    group.add_argument('--cpa-filter', default=None, choices=CPA_FILTER_NAMES)
    _add_verbosity_options(tr)

    ev = subparsers.add_parser('eval', help='mAP@0.5 of a checkpoint on the validation sets')
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--data-dir', default="./data/fog", help='benchmark root directory')
    ev.add_argument('--domain', default='both', choices=('source', 'target', 'both'))
    ev.add_argument('--use-teacher', action='store_true',
                    help='evaluate the EMA teacher weights of the checkpoint')
    ev.add_argument('--iou-threshold', type=float, default=0.5)
    ev.add_argument('--score-floor', type=float, default=0.05)
    ev.add_argument('--report', default=None,
                    help='JSON report path (default: next to the checkpoint)')
    ev.add_argument('--plot-dir', default=None,
                    help='write precision-recall and confidence plots here')
    _add_verbosity_options(ev)

    ab = subparsers.add_parser('ablate', help='train and tabulate one ablation table')
    ab.add_argument('--table', default='components', choices=ABLATION_TABLE_NAMES)
    ab.add_argument('--data-dir', default="./data/fog", help='benchmark root directory')
    ab.add_argument('--out-dir', default="./runs/ablation")
    _add_schedule_options(ab)
    _add_verbosity_options(ab)

    ex = subparsers.add_parser('export-features', help='dump object-query embeddings to CSV')
    ex.add_argument('--checkpoint', required=True)
    ex.add_argument('--data-dir', default="./data/fog", help='benchmark root directory')
    ex.add_argument('--output', default="./results/query_features.csv")
    ex.add_argument('--max-images', type=int, default=200,
                    help='images per domain')
    ex.add_argument('--use-teacher', action='store_true')
    _add_verbosity_options(ex)

    return parser
