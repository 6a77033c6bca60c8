"""
Ablation runner: trains one model per row of a table of component
switches, with identical seeds, and tabulates target-domain mAP.
"""
import os
import logging

from collections import namedtuple

import pandas as pd

from datr.evaluation import evaluate_map
from datr.self_training import train
from datr.utils.loaders import read_json, write_json
from datr.utils.mutils import load_model


logger = logging.getLogger(__name__)

AblationRow = namedtuple('AblationRow', 'name overrides reference_map')


def _switches(backbone=False, cpa=False, das=False, self_training=False, **extra):
    overrides = {'use_backbone_align': backbone, 'use_cpa': cpa, 'use_das': das,
                 'use_self_training': self_training, 'cpa_filter': 'none'}
    overrides.update(extra)
    return overrides


# reference_map: mAP@0.5 of the same row on the full-scale foggy street benchmark
ABLATION_TABLES = {
    'components': [
        AblationRow('source-only', _switches(), 35.6),
        AblationRow('backbone-align', _switches(backbone=True), 42.5),
        AblationRow('cpa', _switches(cpa=True), 43.7),
        AblationRow('das', _switches(das=True), 41.8),
        AblationRow('backbone-align+cpa', _switches(backbone=True, cpa=True), 46.9),
        AblationRow('backbone-align+das', _switches(backbone=True, das=True), 47.1),
        AblationRow('backbone-align+cpa+das', _switches(backbone=True, cpa=True, das=True), 48.7),
        AblationRow('all+self-training', _switches(backbone=True, cpa=True, das=True, self_training=True), 52.8),
    ],
    'cpa-variants': [
        AblationRow('source-only', _switches(), 35.6),
        AblationRow('backbone-align', _switches(backbone=True), 42.5),
        AblationRow('cpa', _switches(cpa=True), 43.7),
        AblationRow('backbone-align+cpa', _switches(backbone=True, cpa=True), 46.9),
        AblationRow('confidence@0.2', _switches(backbone=True, cpa=True, cpa_filter='confidence',
                                                cpa_confidence_threshold=0.2), 41.4),
        AblationRow('confidence@0.5', _switches(backbone=True, cpa=True, cpa_filter='confidence',
                                                cpa_confidence_threshold=0.5), 44.8),
        AblationRow('confidence@0.8', _switches(backbone=True, cpa=True, cpa_filter='confidence',
                                                cpa_confidence_threshold=0.8), 44.0),
        AblationRow('hungarian-matching', _switches(backbone=True, cpa=True, cpa_filter='matching'), 44.3),
    ],
    'thresholds': [AblationRow('burn-in-only', _switches(backbone=True, cpa=True, das=True), 48.7)] + [
        AblationRow('self-training@{}'.format(th),
                    _switches(backbone=True, cpa=True, das=True, self_training=True, pseudo_threshold=th), ref)
        for th, ref in ((0.2, 51.1), (0.3, 52.8), (0.4, 52.2), (0.5, 51.7), (0.6, 51.2), (0.7, 50.6))
    ],
}


def ablation_rows(table):
    if table not in ABLATION_TABLES:
        raise ValueError("{} is not a valid ablation table. "
                         "Must be one of {}".format(table, sorted(ABLATION_TABLES)))
    return ABLATION_TABLES[table]


def _run_row(config, benchmark, runs_dir):
    """Trains (or reuses) the run of one configuration and evaluates its
    final snapshot on both validation sets.

    Runs are keyed by configuration fingerprint, so a configuration shared
    by several tables is trained once.
    """
    run_dir = os.path.join(runs_dir, config.fingerprint())
    report_path = os.path.join(run_dir, 'final_report.json')
    if os.path.exists(report_path):
        logger.info("Reusing finished run {}".format(run_dir))
        return read_json(report_path)

    result = train(config, benchmark, run_dir)
    use_teacher = config.use_self_training and config.mutual_epochs > 0
    model, _ = load_model(result.checkpoint, use_teacher=use_teacher)
    reports = {
        'target': evaluate_map(model, benchmark.target_val, batch_size=config.eval_batch_size,
                               fingerprint=config.fingerprint(), checkpoint=result.checkpoint).to_dict(),
        'source': evaluate_map(model, benchmark.source_val, batch_size=config.eval_batch_size,
                               fingerprint=config.fingerprint(), checkpoint=result.checkpoint).to_dict(),
        'use_teacher': use_teacher,
    }
    write_json(reports, report_path, indent=2)
    return reports


def run_ablation(config, benchmark, out_dir, table='components'):
    """Trains every row of ``table`` from ``config`` and writes
    ``<table>.csv`` plus a plain-text summary to ``out_dir``.

    Returns:
        pd.DataFrame, one row per configuration
    """
    rows = ablation_rows(table)
    records = []
    for row in rows:
        logger.info("Ablation [{}] row '{}'".format(table, row.name))
        row_config = config.override(**row.overrides)
        reports = _run_row(row_config, benchmark, os.path.join(out_dir, 'runs'))
        records.append({
            'row': row.name,
            'backbone_align': row_config.use_backbone_align,
            'cpa': row_config.use_cpa,
            'das': row_config.use_das,
            'self_training': row_config.use_self_training,
            'cpa_filter': row_config.cpa_filter,
            'cpa_confidence_threshold': row_config.cpa_confidence_threshold,
            'pseudo_threshold': row_config.pseudo_threshold,
            'target_mAP': 100 * reports['target']['mAP'],
            'source_mAP': 100 * reports['source']['mAP'],
            'reference_mAP': row.reference_map,
            'fingerprint': row_config.fingerprint(),
        })

    df = pd.DataFrame(records)
    csv_path = os.path.join(out_dir, '{}.csv'.format(table))
    summary_path = os.path.join(out_dir, '{}_summary.txt'.format(table))
    summary = df[['row', 'target_mAP', 'source_mAP', 'reference_mAP']].to_string(
        index=False, float_format=lambda v: '{:.1f}'.format(v))
    try:
        os.makedirs(out_dir, exist_ok=True)
        df.to_csv(csv_path, index=False)
        with open(summary_path, 'w') as f:
            f.write(summary + '\n')
    except OSError as e:
        raise OSError("Could not write ablation table to {}: {}".format(out_dir, e)) from e
    logger.info("Ablation [{}]:\n{}".format(table, summary))
    return df
