import csv
import io
import logging
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from scipy.spatial.distance import pdist

from .datasim import few_shot_split, generate_dataset
from .diffcore import DTYPE, NORM_EPS, cosine_similarity_matrix
from .helpers import atomic_write, canonical_json, mean_std, sha256_bytes
from .losses import kl_uniformity, prototype_affinity, separation_loss
from .quantizer import NoiseSource, mean_row_entropy
from .trainer import SCOPES, TrainConfig, train


logger = logging.getLogger(__name__)

DEFAULT_TAUS = (0.1, 0.3, 0.5, 1.0, 3.0, 5.0)
DEFAULT_SHOTS = (1, 2, 4, 8, 16)

# Published real-dataset numbers, carried into reports as context only
PUBLISHED_REFERENCE = {
    'temperature_sweep': {'accuracy': {0.1: 70.57, 0.3: 70.68, 0.5: 70.82, 1.0: 71.03, 3.0: 69.67, 5.0: 69.57}},
    'loss_ablation': {'accuracy': {'A': 69.95, 'A+S': 69.19, 'A+C': 70.01, 'A+C+S': 71.03}},
    'prompt_ablation': {'accuracy': {'class_only': 67.66, 'fixed_template': 69.19, 'learnable': 71.03}},
    'strategy_compare': {'accuracy': {'centroid': 69.60, 'codebook': 70.06, 'prompted': 71.03},
                         'paa': {'centroid': 90.4, 'codebook': 87.7, 'prompted': 93.8}},
    'component_ablation': {'accuracy': {'no_adapter': 56.73, 'no_prompt': 67.66, 'no_quantization': 67.59,
                                        'full': 71.03}},
    # the published scopes tune encoder layers rather than the adapter/fusion split used here
    'scope_ablation': {'accuracy': {'last_2_mlp': 64.19, 'last_4_mlp': 69.71, 'last_1_block': 71.03,
                                    'last_2_blocks': 70.52, 'last_3_blocks': 70.57, 'all_layers': 20.78}},
    'fewshot_curve': {},
}


@dataclass
class MetricsReport:
    """Classification metrics of one evaluation

    paa is None when no sample was classified correctly (undefined, never reported as 0); per_class_accuracy is None
    for a class with no samples.
    """
    accuracy: float
    paa: Optional[float]
    per_class_accuracy: list
    confusion: list
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def classify(features, prototypes):
    """Nearest prototype by cosine similarity; 1-based labels, ties to the lowest index

    :param features: torch.tensor (N, d)

    :param prototypes: PrototypeSet

    :return: torch.tensor (N,)
    """
    if (torch.linalg.vector_norm(features, dim=1) < NORM_EPS).any():
        raise ValueError('degenerate feature')
    return cosine_similarity_matrix(features, prototypes.vectors).argmax(dim=1) + 1


def paa(hard, predictions, labels):
    """Prototype assignment accuracy over the correctly classified samples

    :param hard: torch.tensor (N, K) one-hot assignment

    :param predictions: torch.tensor (N,) 1-based

    :param labels: torch.tensor (N,) 1-based

    :return: float, or None if no prediction is correct
    """
    assert len(hard) == len(predictions) == len(labels), "Length mismatch"
    correct = predictions == labels
    if not correct.any():
        return None
    assigned = hard.argmax(dim=1) + 1
    return float((assigned[correct] == labels[correct]).double().mean())


def confusion_matrix(labels, predictions, num_classes):
    """Counts (K, K): row = true class, column = predicted class"""
    flat = (labels.long() - 1) * num_classes + (predictions.long() - 1)
    return torch.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def config_hash(config):
    return sha256_bytes(canonical_json(config.to_dict()).encode('utf-8'))[:16]


def evaluate(model, data, config=None, noise=None):
    """Deterministic (or fixed-noise) evaluation of a trained model

    :param model: PcqModel

    :param data: LabeledFeatures

    :param config: TrainConfig (default = model.config)

    :param noise: Gumbel noise override; by default noise is used only when config.eval_noise is set

    :return: 2-tuple (MetricsReport, ForwardPass)
    """
    config = config or model.config
    if noise is None and config.eval_noise:
        noise = NoiseSource(config.seed, 'eval_noise')
    with torch.no_grad():
        out = model(data.features, noise)
        preds = classify(out.hybrid, out.prototypes)
    k = model.num_classes
    confusion = confusion_matrix(data.labels, preds, k)
    counts = confusion.sum(dim=1)
    per_class = [float(confusion[i, i] / counts[i]) if counts[i] else None for i in range(k)]
    report = MetricsReport(
        accuracy=float(confusion.diagonal().sum()) / data.N,
        paa=paa(out.assignment.hard, preds, data.labels),
        per_class_accuracy=per_class,
        confusion=confusion.tolist(),
        metadata={'config_hash': config_hash(config), 'seed': config.seed},
    )
    return report, out


def prototype_geometry(prototypes):
    """Pairwise-distance summary of a prototype set"""
    v = prototypes.vectors.detach()
    dists = pdist(v.numpy())
    return {'min_distance': float(dists.min()), 'mean_distance': float(dists.mean()),
            'separation': float(separation_loss(v)), 'kl_uniformity': float(kl_uniformity(prototype_affinity(v)))}


def run_experiment(config, train_data, test_data):
    """Trains on train_data and evaluates on test_data

    :return: dict
        accuracy, accuracy_noise (with fixed Gumbel noise), paa, entropy (mean Y row entropy under that noise),
        final_total (last-epoch training loss) and min prototype distance
    """
    state = train(config, train_data)
    report, out = evaluate(state.model, test_data, config.replace(eval_noise=False))
    noisy, noisy_out = evaluate(state.model, test_data, config, noise=NoiseSource(config.seed, 'eval_noise'))
    return {
        'accuracy': report.accuracy,
        'accuracy_noise': noisy.accuracy,
        'paa': report.paa,
        'paa_noise': noisy.paa,
        'entropy': mean_row_entropy(noisy_out.assignment.Y),
        'final_total': state.history[-1]['total'] if state.history else None,
        'min_prototype_distance': prototype_geometry(out.prototypes)['min_distance'],
    }


def _run_cell(cell):
    row = {'variant': cell['variant'], 'seed': cell['seed']}
    row.update(cell['extra'])
    try:
        row.update(run_experiment(TrainConfig.from_dict(cell['config']), cell['train'], cell['test']))
        row['error'] = ''
    except Exception as e:
        logger.warning('run %s seed %s failed: %s', cell['variant'], cell['seed'], e)
        row['error'] = '{}: {}'.format(type(e).__name__, e)
    return cell['order'], row


def _init_worker():
    torch.set_num_threads(1)


def run_cells(cells, workers=1):
    """Runs independent cells serially or in a process pool; rows come back sorted by (variant order, seed)"""
    if workers <= 1:
        threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            results = [_run_cell(c) for c in cells]
        finally:
            torch.set_num_threads(threads)
    else:
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context('spawn'),
                                 initializer=_init_worker) as pool:
            results = list(pool.map(_run_cell, cells))
    return [row for _, row in sorted(results, key=lambda r: r[0])]


@dataclass
class SweepResult:
    """Per-run rows plus per-variant summary of one harness"""
    name: str
    runs: list
    summary: list
    reference: dict = field(default_factory=dict)

    def to_json(self):
        return canonical_json({'name': self.name, 'runs': self.runs, 'summary': self.summary,
                               'published_reference': self.reference})

    def write(self, directory):
        """Writes <name>_runs.csv, <name>_summary.csv and <name>.json"""
        os.makedirs(directory, exist_ok=True)
        atomic_write(os.path.join(directory, self.name + '_runs.csv'), rows_to_csv(self.runs))
        atomic_write(os.path.join(directory, self.name + '_summary.csv'), rows_to_csv(self.summary))
        atomic_write(os.path.join(directory, self.name + '.json'), self.to_json())


def rows_to_csv(rows):
    """RFC 4180 CSV (CRLF line ends, minimal quoting); columns follow first-seen order"""
    columns = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator='\r\n', quoting=csv.QUOTE_MINIMAL)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ('' if row.get(k) is None else row.get(k)) for k in columns})
    return buf.getvalue()


def summarize(runs, metrics=('accuracy', 'accuracy_noise', 'paa', 'entropy')):
    """mean/std of each metric per variant, in first-seen variant order"""
    variants = []
    for r in runs:
        if r['variant'] not in variants:
            variants.append(r['variant'])
    summary = []
    for v in variants:
        group = [r for r in runs if r['variant'] == v]
        ok = [r for r in group if not r['error']]
        row = {'variant': v, 'runs': len(group), 'errors': len(group) - len(ok)}
        for m in metrics:
            row[m + '_mean'], row[m + '_std'] = mean_std(r.get(m) for r in ok)
        summary.append(row)
    return summary


def _cells(variants, base_config, data, seeds, shots):
    """One cell per (variant, seed); each seed uses one split shared by all variants"""
    cells = []
    for seed in seeds:
        train_data, test_data = few_shot_split(data, shots, seed)
        for order, (variant, overrides) in enumerate(variants):
            config = base_config.replace(seed=seed, **overrides)
            cells.append({'order': (order, seed), 'variant': variant, 'seed': seed, 'extra': {'shots': shots},
                          'config': config.to_dict(), 'train': train_data, 'test': test_data})
    return cells


def _harness(name, variants, base_config, data, seeds, shots, workers):
    cells = _cells(variants, base_config, data, seeds, shots)
    logger.info('%s: %d runs on %d worker(s)', name, len(cells), max(workers, 1))
    runs = run_cells(cells, workers)
    return SweepResult(name, runs, summarize(runs), PUBLISHED_REFERENCE.get(name, {}))


def temperature_sweep(base_config, data, taus=DEFAULT_TAUS, seeds=(0,), shots=8, workers=1):
    """One train+eval per (tau, seed); summary reports mean accuracy and mean assignment entropy per tau

    :return: SweepResult
    """
    taus = list(taus)
    if not taus or any(not t > 0 for t in taus):
        raise ValueError('taus must be non-empty and positive')
    variants = [(float(t), {'tau': float(t)}) for t in taus]
    return _harness('temperature_sweep', variants, base_config, data, seeds, shots, workers)


def loss_ablation(base_config, data, seeds=(0,), shots=8, workers=1):
    """A, A+S, A+C, A+C+S by switching lambda1 (compactness) and lambda2 (separation) off"""
    l1 = base_config.lambda1 or 0.01
    l2 = base_config.lambda2 or 0.01
    variants = [('A', {'lambda1': 0.0, 'lambda2': 0.0}),
                ('A+S', {'lambda1': 0.0, 'lambda2': l2}),
                ('A+C', {'lambda1': l1, 'lambda2': 0.0}),
                ('A+C+S', {'lambda1': l1, 'lambda2': l2})]
    return _harness('loss_ablation', variants, base_config, data, seeds, shots, workers)


def prompt_ablation(base_config, data, seeds=(0,), shots=8, workers=1):
    """Class token only (m = 0), m frozen prompts, m learnable prompts"""
    variants = [('class_only', {'m': 0, 'prototype_strategy': 'prompted'}),
                ('fixed_template', {'prompt_mode': 'fixed', 'prototype_strategy': 'prompted'}),
                ('learnable', {'prompt_mode': 'learnable', 'prototype_strategy': 'prompted'})]
    return _harness('prompt_ablation', variants, base_config, data, seeds, shots, workers)


def strategy_compare(base_config, data, seeds=(0,), shots=8, workers=1):
    """Centroid, codebook and prompted prototypes on identical splits"""
    variants = [(s, {'prototype_strategy': s}) for s in ('centroid', 'codebook', 'prompted')]
    return _harness('strategy_compare', variants, base_config, data, seeds, shots, workers)


def component_ablation(base_config, data, seeds=(0,), shots=8, workers=1):
    """Full model against removing the adapter, the prompts, or the quantisation/fusion path"""
    variants = [('full', {}),
                ('no_adapter', {'use_adapter': False}),
                ('no_prompt', {'m': 0}),
                ('no_quantization', {'use_quantization': False})]
    return _harness('component_ablation', variants, base_config, data, seeds, shots, workers)


def scope_ablation(base_config, data, seeds=(0,), shots=8, workers=1):
    """Each trainable_scope; 'all' also unfreezes the encoder surrogate and may diverge"""
    variants = [(s, {'trainable_scope': s}) for s in SCOPES]
    return _harness('scope_ablation', variants, base_config, data, seeds, shots, workers)


def fewshot_curve(base_config, spec, shots=DEFAULT_SHOTS, seeds=(0,), workers=1):
    """Mean test accuracy per shot count on one generated dataset

    :param spec: DatasetSpec

    :return: SweepResult (variant = shot count)
    """
    data = generate_dataset(spec)
    cells = []
    for order, s in enumerate(shots):
        for c in _cells([(int(s), {})], base_config, data, seeds, int(s)):
            c['order'] = (order, c['seed'])
            cells.append(c)
    runs = run_cells(cells, workers)
    return SweepResult('fewshot_curve', runs, summarize(runs), PUBLISHED_REFERENCE['fewshot_curve'])


def pca_basis(points):
    """Mean and top-2 principal directions (2, d) with the sign convention applied"""
    if points.shape[0] < 2:
        raise ValueError('need at least 2 points')
    points = points.detach().to(DTYPE)
    mean = points.mean(dim=0)
    centered = points - mean
    cov = centered.t() @ centered / (points.shape[0] - 1)
    evals, evecs = torch.linalg.eigh(cov)
    if evals.max() <= torch.finfo(DTYPE).eps * float(points.abs().max()) ** 2:
        raise ValueError('rank-0 input')
    order = torch.argsort(evals, descending=True)[:2]
    components = evecs[:, order].t()
    if components.shape[0] < 2:
        components = torch.cat([components, torch.zeros_like(components)])
    for i in range(components.shape[0]):
        j = int(components[i].abs().argmax())
        if components[i, j] < 0:
            components[i] = -components[i]
    return mean, components


def project_2d(points):
    """Coordinates of points on their top-2 principal components

    Each component is signed so that its largest-magnitude entry is positive.

    :param points: torch.tensor (N, d), N >= 2

    :return: torch.tensor (N, 2)
    """
    mean, components = pca_basis(points)
    return (points.detach().to(DTYPE) - mean) @ components.t()


def export_geometry(before, after, features, labels, csv_path, svg_path=None):
    """Joint 2-d projection of prototypes before/after training and instance features

    CSV columns: id, x, y, label, phase (phase in before/after/feature).
    """
    k = before.num_classes
    stacked = torch.cat([before.vectors.detach(), after.vectors.detach(), features.detach()])
    coords = project_2d(stacked)
    phases = ['before'] * k + ['after'] * k + ['feature'] * features.shape[0]
    proto_labels = list(range(1, k + 1))
    all_labels = proto_labels + proto_labels + [int(y) for y in labels]
    rows = [{'id': i, 'x': float(coords[i, 0]), 'y': float(coords[i, 1]), 'label': all_labels[i],
             'phase': phases[i]} for i in range(len(phases))]
    atomic_write(csv_path, rows_to_csv(rows))
    if svg_path is not None:
        _scatter_svg(coords, all_labels, phases, svg_path)
    return rows


def _scatter_svg(coords, labels, phases, path):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    markers = {'feature': ('.', 12), 'before': ('x', 60), 'after': ('*', 120)}
    fig, ax = plt.subplots(figsize=(6, 6))
    for phase, (marker, size) in markers.items():
        idx = [i for i, p in enumerate(phases) if p == phase]
        if idx:
            ax.scatter(coords[idx, 0].numpy(), coords[idx, 1].numpy(), c=[labels[i] for i in idx], cmap='tab20',
                       marker=marker, s=size, label=phase)
    ax.legend()
    ax.set_xlabel('PC 1')
    ax.set_ylabel('PC 2')
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
