import os

import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, out_path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        fig.savefig(out_path, dpi=100, bbox_inches='tight')
    except OSError as e:
        raise OSError("Could not write figure {}: {}".format(out_path, e)) from e
    finally:
        plt.close(fig)
    return out_path


def plot_pr_curves(curves, per_class_ap, out_path, title='Precision-recall at IoU 0.5'):
    """Draws one precision/recall curve per class and saves the figure.

    Args:
        curves (dict): class name -> (precision, recall) arrays
        per_class_ap (dict): class name -> AP in [0, 1] (or None)
        out_path (str): png file
    """
    fig = plt.figure()
    lw = 2
    for name, (precision, recall) in sorted(curves.items()):
        ap = per_class_ap.get(name) or 0.0
        plt.step(recall, precision, where='post', lw=lw,
                 label='{} (AP = {:.2f})'.format(name, 100 * ap))
    plt.xlim([0.0, 1.0])
    plt.ylim([0.0, 1.05])
    plt.xlabel('Recall')
    plt.ylabel('Precision')
    plt.title(title)
    plt.legend(loc="lower left")
    return _save(fig, out_path)


def plot_histogram(hist_data, ax, labels=('kept', 'discarded')):
    """Stacked-by-colour histogram of query confidences on [0, 1]:
    teal for the scores kept as pseudo-labels, wine for the discarded ones.
    """
    edges = np.linspace(0.0, 1.0, 21)
    ax.hist(hist_data, bins=edges, color=['#009292', '#920000'], label=list(labels))
    ax.set_xlim(0.0, 1.0)
    ax.set_xticks(edges[::2])
    ax.set_xlabel('Max class score')
    ax.set_ylabel('Queries')
    ax.set_title('Query confidence distribution')
    ax.legend()


def plot_confidence_histogram(scores, out_path, th=0.3):
    """Histogram of per-query max class scores split at the pseudo-label
    threshold.

    Args:
        scores (np.array): max class score of every query, shape=(N,)
        out_path (str): png file
        th (float, optional): pseudo-label threshold. Defaults to 0.3.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    fig, ax = plt.subplots()
    plot_histogram([scores[scores >= th], scores[scores < th]], ax)
    ax.axvline(th, color='black', linestyle='--', lw=1)
    return _save(fig, out_path)
