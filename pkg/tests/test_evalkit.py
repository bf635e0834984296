import csv
import json
import os

from protoquant.evalkit import _cells

from .test_simple import *


def _one_hot(indices, k):
    return F.one_hot(torch.tensor(indices), k).to(torch.float64)


# evalkit.py
def test_classify(orthonormal_3):
    assert torch.equal(classify(orthonormal_3.vectors, orthonormal_3), torch.tensor([1, 2, 3]))
    tie = torch.tensor([[1., 1., 0.]], dtype=torch.float64)
    assert torch.equal(classify(tie, orthonormal_3), torch.tensor([1]))
    with pytest.raises(ValueError, match='degenerate feature'):
        classify(torch.zeros((1, 3), dtype=torch.float64), orthonormal_3)


def test_classify_matches_loops():
    gen = make_generator(0, 'classify')
    features = torch.randn((200, 5), generator=gen, dtype=torch.float64)
    protos = PrototypeSet(l2_normalize_rows(torch.randn((6, 5), generator=gen, dtype=torch.float64)), 'codebook')
    preds = classify(features, protos)
    for i in range(200):
        sims = [float(features[i] @ protos.vectors[k]) / float(features[i].norm()) for k in range(6)]
        assert int(preds[i]) == max(range(6), key=lambda k: (sims[k], -k)) + 1


def test_paa():
    labels = torch.tensor([1, 2, 3])
    assert paa(_one_hot([0, 1, 2], 3), labels, labels) == 1.
    preds = torch.tensor([1, 2, 3, 1])
    labels = torch.tensor([1, 2, 3, 2])
    assert abs(paa(_one_hot([0, 1, 0, 1], 3), preds, labels) - 2 / 3) < 1e-15
    assert paa(_one_hot([0, 1], 3), torch.tensor([2, 1]), torch.tensor([1, 2])) is None


def test_confusion_matrix():
    cm = confusion_matrix(torch.tensor([1, 1, 2, 3]), torch.tensor([1, 2, 2, 1]), 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]


def test_evaluate(trained_state, small_split):
    _, test_data = small_split
    report, out = evaluate(trained_state.model, test_data)
    confusion = torch.tensor(report.confusion)
    assert report.accuracy == float(confusion.diagonal().sum()) / test_data.N
    preds = classify(out.hybrid, out.prototypes)
    assert report.accuracy == float((preds == test_data.labels).double().mean())
    assert all(0. <= a <= 1. for a in report.per_class_accuracy)
    assert report.metadata['seed'] == 0
    again, _ = evaluate(trained_state.model, test_data)
    assert again.to_dict() == report.to_dict()


def test_evaluate_absent_class(trained_state, small_split):
    _, test_data = small_split
    report, _ = evaluate(trained_state.model, test_data.subset(torch.nonzero(test_data.labels != 2).squeeze(1)))
    assert report.per_class_accuracy[1] is None
    text = canonical_json(report.to_dict())
    assert 'NaN' not in text and json.loads(text)['per_class_accuracy'][1] is None


def test_classify_through_fusion_at_init(small_split, tiny_config):
    data = small_split[1]
    model = PcqModel(4, 16, tiny_config)
    _, out = evaluate(model, data)
    assert torch.equal(classify(out.hybrid, out.prototypes), classify(model.adapter(data.features), out.prototypes))


def test_prototype_geometry(orthonormal_3):
    g = prototype_geometry(orthonormal_3)
    assert abs(g['min_distance'] - math.sqrt(2)) < 1e-12
    assert abs(g['separation'] - 6 * math.exp(-2)) < 1e-12
    assert abs(g['kl_uniformity']) < 1e-12


def test_rows_to_csv():
    text = rows_to_csv([{'a': 1, 'b': 'x,y'}, {'a': None, 'c': 2}])
    assert text == 'a,b,c\r\n1,"x,y",\r\n,,2\r\n'


def test_summarize():
    runs = [{'variant': 'v', 'accuracy': 0.5, 'error': ''}, {'variant': 'v', 'accuracy': 0.7, 'error': ''},
            {'variant': 'w', 'accuracy': None, 'error': 'boom'}]
    summary = summarize(runs, metrics=('accuracy',))
    assert [row['variant'] for row in summary] == ['v', 'w']
    assert abs(summary[0]['accuracy_mean'] - 0.6) < 1e-12
    assert summary[1]['errors'] == 1 and math.isnan(summary[1]['accuracy_mean'])


def test_temperature_sweep_single(small_data, tiny_config, tmp_path):
    result = temperature_sweep(tiny_config, small_data, taus=[1.0], seeds=[0], shots=4)
    assert len(result.runs) == 1 and len(result.summary) == 1
    assert result.runs[0]['error'] == ''
    result.write(str(tmp_path))
    with open(os.path.join(str(tmp_path), 'temperature_sweep.json')) as f:
        assert json.load(f)['runs'][0]['variant'] == 1.0
    with open(os.path.join(str(tmp_path), 'temperature_sweep_runs.csv'), newline='') as f:
        assert len(list(csv.DictReader(f))) == 1
    with pytest.raises(ValueError):
        temperature_sweep(tiny_config, small_data, taus=[])
    with pytest.raises(ValueError):
        temperature_sweep(tiny_config, small_data, taus=[0.])


def test_temperature_sweep_entropy_grows_with_tau(small_data, tiny_config):
    result = temperature_sweep(tiny_config, small_data, seeds=[0], shots=4)
    by_tau = sorted((row['variant'], row['entropy_mean']) for row in result.summary)
    assert [tau for tau, _ in by_tau] == sorted(DEFAULT_TAUS)
    entropies = [e for _, e in by_tau]
    assert all(a <= b for a, b in zip(entropies, entropies[1:]))


def test_loss_ablation_rows(small_data, tiny_config):
    result = loss_ablation(tiny_config, small_data, seeds=[0, 1], shots=4)
    assert [r['variant'] for r in result.runs] == ['A', 'A', 'A+S', 'A+S', 'A+C', 'A+C', 'A+C+S', 'A+C+S']
    assert result.reference['accuracy']['A+C+S'] == 71.03
    train_data, test_data = few_shot_split(small_data, 4, 0)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        alone = run_experiment(tiny_config.replace(lambda1=0., lambda2=0.), train_data, test_data)
    finally:
        torch.set_num_threads(threads)
    assert {k: result.runs[0][k] for k in alone} == alone


def test_harness_row_counts(small_data, tiny_config):
    assert len(strategy_compare(tiny_config, small_data, shots=4).runs) == 3
    assert len(prompt_ablation(tiny_config, small_data, shots=4).runs) == 3
    assert len(component_ablation(tiny_config, small_data, shots=4).runs) == 4
    scope = scope_ablation(tiny_config, small_data, shots=4)
    assert len(scope.runs) == 4
    assert scope.reference['accuracy']['last_1_block'] == 71.03


def test_strategy_compare_separable(tiny_config):
    spec = DatasetSpec(num_classes=3, dim=8, n_per_class=10, intra_spread=0., inter_separation=1.0, seed=0)
    result = strategy_compare(tiny_config, generate_dataset(spec), shots=2)
    centroid = [r for r in result.runs if r['variant'] == 'centroid'][0]
    assert centroid['accuracy'] == 1.


def test_run_cells_records_errors(small_data, tiny_config):
    cells = _cells([('bad', {})], tiny_config, small_data, [0], 4)
    cells[0]['config']['tau'] = -1.
    runs = run_cells(cells)
    assert runs[0]['error'].startswith('ValueError')


def test_fewshot_curve_single(tiny_config):
    spec = DatasetSpec(num_classes=3, dim=8, n_per_class=6, seed=0)
    result = fewshot_curve(tiny_config, spec, shots=[1])
    assert len(result.summary) == 1 and result.summary[0]['variant'] == 1


def test_project_2d_identity():
    points = torch.tensor([[2., 0.], [-2., 0.], [0., 1.], [0., -1.]], dtype=torch.float64)
    assert torch.allclose(project_2d(points), points, atol=1e-12)


def test_project_2d_collinear():
    t = torch.linspace(-1, 1, 7, dtype=torch.float64).unsqueeze(1)
    points = t * torch.tensor([[1., 2., 3.]], dtype=torch.float64)
    assert project_2d(points)[:, 1].abs().max() < 1e-9
    with pytest.raises(ValueError, match='rank-0'):
        project_2d(torch.ones((3, 2), dtype=torch.float64))
    with pytest.raises(ValueError):
        project_2d(torch.ones((1, 2), dtype=torch.float64))


def test_project_2d_small_scale():
    points = torch.randn((20, 5), generator=make_generator(1, 'pca'), dtype=torch.float64)
    assert torch.allclose(project_2d(points * 1e-7), project_2d(points) * 1e-7, rtol=1e-6, atol=1e-20)


def test_project_2d_reconstruction():
    points = torch.randn((20, 5), generator=make_generator(0, 'pca'), dtype=torch.float64)
    centered = points - points.mean(0)
    coords = project_2d(points)
    _, components = pca_basis(points)
    residual = float(((centered - coords @ components) ** 2).sum())
    evals = torch.linalg.eigvalsh(centered.t() @ centered)
    assert abs(residual - float(evals[:3].sum())) < 1e-9


def test_export_geometry(tmp_path, random_prototypes, random_features):
    csv_path = str(tmp_path / 'g.csv')
    rows = export_geometry(random_prototypes, codebook_prototypes(4, 6, seed=9).detach(), random_features,
                           torch.arange(8) % 4 + 1, csv_path)
    assert len(rows) == 4 + 4 + 8
    with open(csv_path, newline='') as f:
        read = list(csv.DictReader(f))
    assert list(read[0]) == ['id', 'x', 'y', 'label', 'phase']
    assert [r['phase'] for r in read].count('after') == 4


@pytest.mark.slow
def test_sweep_worker_invariance(small_data, tiny_config):
    serial = temperature_sweep(tiny_config, small_data, taus=[0.5, 1.0], seeds=[0, 1], shots=4, workers=1)
    parallel = temperature_sweep(tiny_config, small_data, taus=[0.5, 1.0], seeds=[0, 1], shots=4, workers=2)
    assert serial.to_json() == parallel.to_json()


@pytest.mark.slow
def test_fewshot_curve_acceptance():
    spec = DatasetSpec()
    data = generate_dataset(spec)
    means = class_means(data.features, data.labels, spec.num_classes)
    oracle = float((cosine_similarity_matrix(data.features, means).argmax(1) + 1 == data.labels).double().mean())
    assert oracle >= 0.95
    result = fewshot_curve(TrainConfig(), spec, seeds=list(range(10)),
                           workers=int(os.environ.get('PCQ_WORKERS', 1)))
    accuracy = [row['accuracy_mean'] for row in result.summary]
    assert all(a <= b for a, b in zip(accuracy, accuracy[1:]))
    assert accuracy[-1] >= 0.90
    assert all(r['paa'] is not None for r in result.runs if r['variant'] == 16)
