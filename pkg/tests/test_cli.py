import json

import numpy as np
import pytest

from tracegp.__main__ import main
from tracegp.data import formats

SMALL = {
    'synth_rows': 12, 'synth_cols': 20, 'synth_rank': 2, 'length_scale': 0.3, 'positives_per_row': 3,
    'alphas': [1.0, 0.0], 's_count': 3, 's_low': 0.1, 'n_negative_sets': 1, 'outer_max_iter': 5,
    'top_k': 10,
}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv('TRACEGP_SEED', raising=False)
    monkeypatch.delenv('TRACEGP_THREADS', raising=False)
    (tmp_path / 'config.json').write_text(json.dumps(SMALL))
    return tmp_path


def _exit_code(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


def _synth(ws, out='data', seed='3'):
    main(['-c', str(ws / 'config.json'), '--seed', seed, '-o', str(ws / out), 'synth'])
    return ws / out


def _train(ws, labels, out='run'):
    main(['-c', str(ws / 'config.json'), '--seed', '3', '--labels', str(labels), '-o', str(ws / out), 'train'])
    return ws / out


class TestSynth:
    def test_outputs(self, workspace):
        data = _synth(workspace)
        for name in ('row_kernel.krnl', 'column_kernel.krnl', 'z.krnl', 'labels.tsv'):
            assert (data / name).exists()
        z = formats.read_matrix(data / 'z.krnl')
        assert z.shape == (12, 20)
        s = np.linalg.svd(z, compute_uv=False)
        assert s[2] <= 1e-8 * s[0]
        labels = formats.read_labels(data / 'labels.tsv')
        assert int(labels.positive.sum()) == 12 * 3

    def test_deterministic(self, workspace):
        first, second = _synth(workspace, 'a'), _synth(workspace, 'b')
        for name in ('z.krnl', 'labels.tsv'):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_seed_from_environment(self, workspace, monkeypatch):
        monkeypatch.setenv('TRACEGP_SEED', '3')
        main(['-c', str(workspace / 'config.json'), '-o', str(workspace / 'env'), 'synth'])
        first = _synth(workspace, 'flag')
        assert (workspace / 'env' / 'z.krnl').read_bytes() == (first / 'z.krnl').read_bytes()

    def test_no_positives_is_a_data_error(self, workspace):
        (workspace / 'config.json').write_text(json.dumps(dict(SMALL, positives_per_row=0)))
        assert _exit_code(['-c', str(workspace / 'config.json'), '--seed', '1', 'synth']) == 2


class TestKernel:
    def test_graph_kernel(self, workspace):
        (workspace / 'g.tsv').write_text("nodes\t4\n0\t1\n1\t2\t0.5\n")
        main(['--graph', str(workspace / 'g.tsv'), '-o', str(workspace / 'k1'), 'kernel'])
        main(['--graph', str(workspace / 'g.tsv'), '-o', str(workspace / 'k2'), 'kernel'])
        kernel = formats.read_matrix(workspace / 'k1' / 'kernel.krnl')
        basis = formats.read_matrix(workspace / 'k1' / 'basis.krnl')
        np.testing.assert_allclose(basis @ basis.T, kernel, atol=1e-10)
        assert (workspace / 'k1' / 'kernel.krnl').read_bytes() == (workspace / 'k2' / 'kernel.krnl').read_bytes()

    def test_edgeless_graph(self, workspace):
        (workspace / 'g.tsv').write_text("nodes\t3\n")
        main(['--graph', str(workspace / 'g.tsv'), '-o', str(workspace / 'k'), 'kernel'])
        kernel = formats.read_matrix(workspace / 'k' / 'kernel.krnl')
        np.testing.assert_allclose(kernel, np.exp(-1.0) * np.eye(3), atol=1e-12)

    def test_malformed_graph(self, workspace):
        (workspace / 'g.tsv').write_text("nodes\t3\n0\tone\n")
        assert _exit_code(['--graph', str(workspace / 'g.tsv'), 'kernel']) == 2


class TestTrainEvaluate:
    def test_train_manifest(self, workspace):
        data = _synth(workspace)
        run = _train(workspace, data / 'labels.tsv')
        manifest = json.loads((run / 'manifest.json').read_text())
        assert manifest['dims'] == [12, 20]
        assert len(manifest['models']) == 2 * 3
        assert all((run / entry['file']).exists() for entry in manifest['models'])
        reports = json.loads((run / 'reports.json').read_text())
        assert all(r['trace']['steps'][0] == 'init' for r in reports)

        again = _train(workspace, data / 'labels.tsv', 'run2')
        first, second = (json.loads((d / 'manifest.json').read_text()) for d in (run, again))
        for manifest in (first, second):
            del manifest['config']['output_dir']
        assert first == second
        assert (run / 'reports.json').read_bytes() == (again / 'reports.json').read_bytes()

    def test_evaluate_manifest(self, workspace):
        data = _synth(workspace)
        run = _train(workspace, data / 'labels.tsv')
        main(['--manifest', str(run / 'manifest.json'), '--test-labels', str(data / 'labels.tsv'),
              '-c', str(workspace / 'config.json'), '-o', str(workspace / 'ev'), 'evaluate'])
        metrics = json.loads((workspace / 'ev' / 'metrics.json').read_text())
        assert len(metrics['results']) == 6
        assert {'alpha', 's', 'lam'} <= set(metrics['selected'])
        curves = (workspace / 'ev' / 'curves.tsv').read_text().splitlines()
        assert curves[0] == 'k\tprecision\trecall'
        assert len(curves) == 11

    def test_evaluate_scores(self, workspace):
        data = _synth(workspace)
        main(['--scores', str(data / 'z.krnl'), '--test-labels', str(data / 'labels.tsv'),
              '-o', str(workspace / 'ev'), 'evaluate'])
        metrics = json.loads((workspace / 'ev' / 'metrics.json').read_text())
        assert metrics['results'][0]['metrics']['auc'] == pytest.approx(1.0)
        assert metrics['results'][0]['metrics']['map100'] == pytest.approx(1.0)

    def test_missing_model_file(self, workspace):
        data = _synth(workspace)
        run = _train(workspace, data / 'labels.tsv')
        manifest = json.loads((run / 'manifest.json').read_text())
        (run / manifest['models'][0]['file']).unlink()
        code = _exit_code(['--manifest', str(run / 'manifest.json'), '--test-labels', str(data / 'labels.tsv'),
                           '-o', str(workspace / 'ev'), 'evaluate'])
        assert code == 2


class TestCrossValidate:
    def test_rowwise(self, workspace):
        data = _synth(workspace)
        argv = ['-c', str(workspace / 'config.json'), '--seed', '5', '--labels', str(data / 'labels.tsv'),
                '--mode', 'rowwise', '-o', str(workspace / 'cv'), 'cv']
        main(argv)
        result = json.loads((workspace / 'cv' / 'cv.json').read_text())
        assert result['mode'] == 'rowwise'
        assert len(result['folds']) == 5
        aucs = [block['selected']['auc'] for block in result['folds']]
        assert result['aggregate']['auc']['mean'] == pytest.approx(np.mean(aucs))

        first = (workspace / 'cv' / 'cv.json').read_bytes()
        main(argv)
        assert (workspace / 'cv' / 'cv.json').read_bytes() == first


class TestUsage:
    def test_unknown_command(self, workspace):
        assert _exit_code(['bogus']) == 1

    def test_missing_seed(self, workspace):
        data = _synth(workspace)
        assert _exit_code(['--labels', str(data / 'labels.tsv'), 'train']) == 1

    def test_missing_input_file(self, workspace):
        assert _exit_code(['--labels', str(workspace / 'absent.tsv'), '--seed', '1', 'train']) == 1

    def test_bad_config(self, workspace):
        (workspace / 'bad.json').write_text('{"alphas": [2.0]}')
        assert _exit_code(['-c', str(workspace / 'bad.json'), '--seed', '1', 'synth']) == 1

    def test_help_without_command(self, workspace, capsys):
        assert main([]) is None
        assert 'synth' in capsys.readouterr().out

    def test_show_config(self, workspace, capsys):
        main(['-c', str(workspace / 'config.json'), 'cfg'])
        assert 'synth_rows' in capsys.readouterr().out
