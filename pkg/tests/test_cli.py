import json

import numpy as np
import pandas as pd
import pytest

import config
from data_io import read_regime_path, write_events, write_exposure, write_model
from main import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main


@pytest.fixture
def model_file(tmp_path, two_state_params):
    path = tmp_path / 'model.json'
    write_model(str(path), two_state_params)
    return str(path)


@pytest.fixture
def order_one_model(tmp_path):
    path = tmp_path / 'order1.json'
    path.write_text(json.dumps({'order': 1, 'Q': [[0.0]], 'lambda': [4.0], 'pi': [1.0]}))
    return str(path)


@pytest.fixture
def data_files(tmp_path, step_exposure):
    events = tmp_path / 'events.csv'
    exposure = tmp_path / 'exposure.csv'
    times = np.sort(np.random.default_rng(17).uniform(0.0, 10.0, 40))
    write_events(str(events), times)
    write_exposure(str(exposure), step_exposure)
    return str(events), str(exposure)


def read_error(out_dir):
    return json.loads((out_dir / 'error.json').read_text())


class TestSimulate:
    def test_same_seed_gives_identical_files(self, tmp_path, model_file):
        for name in ('a', 'b'):
            assert main(['simulate', '--model', model_file, '--horizon', '50', '--seed', '3',
                         '--out-dir', str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / 'a' / 'events.csv').read_bytes() == (tmp_path / 'b' / 'events.csv').read_bytes()
        assert (tmp_path / 'a' / 'regime_path.csv').read_bytes() == \
            (tmp_path / 'b' / 'regime_path.csv').read_bytes()

    def test_zero_horizon_writes_headers_only(self, tmp_path, model_file):
        out = tmp_path / 'out'
        assert main(['simulate', '--model', model_file, '--horizon', '0', '--out-dir', str(out)]) == EXIT_OK
        assert (out / 'events.csv').read_text() == 'time\n'
        assert (out / 'regime_path.csv').read_text() == 'start_time,state\n'

    def test_preset_writes_model_and_exposure(self, tmp_path):
        out = tmp_path / 'out'
        assert main(['simulate', '--preset', 'simulation-study', '--seed', '1', '--out-dir', str(out)]) == EXIT_OK
        for name in ('model.json', 'exposure.csv', 'events.csv', 'regime_path.csv', 'manifest.json'):
            assert (out / name).exists()
        assert json.loads((out / 'model.json').read_text())['lambda'] == [5.0, 10.0, 20.0]

    def test_regime_path_closes_at_manifest_horizon(self, tmp_path, model_file):
        out = tmp_path / 'out'
        code = main(['simulate', '--model', model_file, '--horizon', '25', '--seed', '4', '--out-dir', str(out)])
        assert code == EXIT_OK
        horizon = json.loads((out / 'manifest.json').read_text())['horizon']
        assert horizon == 25.0
        path = read_regime_path(str(out / 'regime_path.csv'), horizon)
        assert path.jump_times[0] == 0.0
        assert path.jump_times[-1] == 25.0
        assert set(path.states) <= {1, 2}

    def test_missing_model_is_usage_error(self, tmp_path):
        assert main(['simulate', '--horizon', '10', '--out-dir', str(tmp_path)]) == EXIT_USAGE
        assert read_error(tmp_path)['error'] == 'InputError'


class TestFit:
    def test_order_one_converges(self, tmp_path, data_files):
        events, exposure = data_files
        out = tmp_path / 'fit'
        code = main(['fit', '--events', events, '--exposure', exposure, '--horizon', '10', '--order', '1',
                     '--out-dir', str(out)])
        assert code == EXIT_OK
        model = json.loads((out / 'model.json').read_text())
        assert model['lambda'][0] == pytest.approx(40 / 12.5)
        report = json.loads((out / 'fit_report.json').read_text())
        assert report['converged']
        assert set(report) >= {'loglik', 'aHat', 'nHat', 'tHat', 'tStarHat'}
        manifest = json.loads((out / 'manifest.json').read_text())
        assert manifest['outputs'] == ['model.json', 'fit_report.json']
        assert manifest['config']['order'] == 1
        assert manifest['settings']['fit']['stop_criterion'] == 'loglik'
        assert [step['order'] for step in manifest['run']['iterations']] == [1] * (report['iterations'] + 1)

    def test_refit_from_own_output_is_immediate(self, tmp_path, data_files):
        events, exposure = data_files
        first, second = tmp_path / 'first', tmp_path / 'second'
        common = ['--events', events, '--exposure', exposure, '--horizon', '10']
        assert main(['fit', *common, '--order', '1', '--out-dir', str(first)]) == EXIT_OK
        assert main(['fit', *common, '--init-model', str(first / 'model.json'),
                     '--out-dir', str(second)]) == EXIT_OK
        assert json.loads((second / 'fit_report.json').read_text())['iterations'] <= 2

    def test_init_model_order_mismatch(self, tmp_path, data_files, model_file):
        events, exposure = data_files
        code = main(['fit', '--events', events, '--exposure', exposure, '--horizon', '10', '--order', '3',
                     '--init-model', model_file, '--out-dir', str(tmp_path / 'out')])
        assert code == EXIT_USAGE
        assert read_error(tmp_path / 'out')['error'] == 'OrderMismatch'

    def test_too_few_claims(self, tmp_path):
        events = tmp_path / 'events.csv'
        events.write_text('time\n1.0\n2.0\n')
        out = tmp_path / 'out'
        code = main(['fit', '--events', str(events), '--horizon', '5', '--order', '3', '--out-dir', str(out)])
        assert code == EXIT_USAGE
        assert read_error(out)['error'] == 'NonIdentifiable'

    def test_iteration_limit_is_exit_one(self, tmp_path, data_files):
        events, exposure = data_files
        code = main(['fit', '--events', events, '--exposure', exposure, '--horizon', '10', '--order', '2',
                     '--max-iter', '1', '--tol', '1e-12', '--out-dir', str(tmp_path / 'out')])
        assert code == EXIT_NUMERICAL
        assert (tmp_path / 'out' / 'model.json').exists()

    def test_missing_exposure_file(self, tmp_path, data_files):
        events, _ = data_files
        code = main(['fit', '--events', events, '--exposure', str(tmp_path / 'none.csv'), '--horizon', '10',
                     '--order', '1', '--out-dir', str(tmp_path / 'out')])
        assert code == EXIT_USAGE
        assert read_error(tmp_path / 'out')['error'] == 'ParseError'

    def test_empty_events(self, tmp_path):
        events = tmp_path / 'events.csv'
        events.write_text('time\n')
        code = main(['fit', '--events', str(events), '--horizon', '5', '--order', '1',
                     '--out-dir', str(tmp_path / 'out')])
        assert code == EXIT_USAGE

    def test_horizon_defaults_to_last_event(self, tmp_path, data_files):
        events, _ = data_files
        out = tmp_path / 'out'
        assert main(['fit', '--events', events, '--order', '1', '--out-dir', str(out)]) == EXIT_OK
        warnings = json.loads((out / 'manifest.json').read_text())['run']['warnings']
        assert any('--horizon' in w['message'] for w in warnings)


class TestDecode:
    def test_order_one_is_always_state_one(self, tmp_path, data_files, order_one_model):
        events, exposure = data_files
        out = tmp_path / 'out'
        code = main(['decode', '--model', order_one_model, '--events', events, '--exposure', exposure,
                     '--horizon', '10', '--out-dir', str(out)])
        assert code == EXIT_OK
        states = pd.read_csv(out / 'states.csv')
        assert len(states) == 40
        assert (states['state'] == 1).all()
        assert np.allclose(states['prob_1'], 1.0)
        windows = pd.read_csv(out / 'windows.csv')
        assert len(windows) == 10
        assert windows['observed'].sum() == 40

    def test_exact_method(self, tmp_path, data_files, model_file):
        events, exposure = data_files
        out = tmp_path / 'out'
        code = main(['decode', '--model', model_file, '--events', events, '--exposure', exposure,
                     '--horizon', '10', '--method', 'exact', '--out-dir', str(out)])
        assert code == EXIT_OK
        windows = pd.read_csv(out / 'windows.csv')
        assert (windows['expected'] > 0).all()

    def test_claims_past_horizon_is_usage_error(self, tmp_path, data_files, model_file):
        events, _ = data_files
        code = main(['decode', '--model', model_file, '--events', events, '--horizon', '5',
                     '--out-dir', str(tmp_path / 'out')])
        assert code == EXIT_USAGE


class TestDiagnose:
    def test_too_few_windows_for_dispersion(self, tmp_path, data_files, three_state_params):
        events, exposure = data_files
        model = tmp_path / 'model3.json'
        write_model(str(model), three_state_params)
        out = tmp_path / 'out'
        # eight windows against nine free parameters
        code = main(['diagnose', '--model', str(model), '--events', events, '--exposure', exposure, '--horizon', '10',
                     '--window', '1.25', '--lags', '2', '--out-dir', str(out)])
        assert code == EXIT_OK
        report = json.loads((out / 'diagnostics.json').read_text())
        assert report['windows'] == 8
        assert report['dispersion'] is None
        assert report['tests']['ljung_box_2'] is not None
        warnings = json.loads((out / 'manifest.json').read_text())['run']['warnings']
        assert any('dispersion' in w['message'] for w in warnings)


class TestConfiguration:
    def test_unknown_stop_criterion_is_usage_error(self, tmp_path, data_files, monkeypatch):
        events, exposure = data_files
        monkeypatch.setitem(config.FIT_CONFIG, 'stop_criterion', 'likelihood')
        out = tmp_path / 'out'
        code = main(['fit', '--events', events, '--exposure', exposure, '--horizon', '10', '--order', '1',
                     '--out-dir', str(out)])
        assert code == EXIT_USAGE
        assert read_error(out)['error'] == 'InputError'
        assert not (out / 'model.json').exists()

    def test_bad_alpha_is_usage_error(self, tmp_path, model_file, monkeypatch):
        monkeypatch.setitem(config.DIAGNOSTICS_CONFIG, 'alpha', 1.5)
        assert main(['simulate', '--model', model_file, '--horizon', '5', '--out-dir', str(tmp_path)]) == EXIT_USAGE


def test_select_order_and_diagnose(tmp_path, data_files):
    events, exposure = data_files
    out = tmp_path / 'select'
    code = main(['select-order', '--events', events, '--exposure', exposure, '--horizon', '10',
                 '--start-order', '1', '--max-order', '1', '--alpha', '1e-12', '--window', '0.5',
                 '--no-evidence-check', '--out-dir', str(out)])
    assert code == EXIT_OK
    selection = json.loads((out / 'selection.json').read_text())
    assert selection['chosenOrder'] == 1
    assert selection['ordersTried'] == [1]
    assert (out / 'manifest.json').exists()

    diagnose_out = tmp_path / 'diagnose'
    code = main(['diagnose', '--model', str(out / 'model.json'), '--events', events, '--exposure', exposure,
                 '--horizon', '10', '--window', '0.5', '--lags', '2', '4', '--out-dir', str(diagnose_out)])
    assert code == EXIT_OK
    report = json.loads((diagnose_out / 'diagnostics.json').read_text())
    assert report['windows'] == 20
    assert set(report['tests']) == {'ljung_box_2', 'ljung_box_4', 'runs_test', 'bartlett_b'}
    assert report['criteria']['n_params'] == 1
