import numpy as np
from django.test import SimpleTestCase

from radu.gradsuite import SUITES, conditioned_arrays, run_suites, suite_network, tiny_sample
from radu.network import ModelParams, NetworkConfig, forward


class GradSuiteTests(SimpleTestCase):

    def test_operation_suites_pass(self):
        names = [name for name in SUITES if name != 'network']
        reports = run_suites(names, seed=5)
        self.assertTrue(reports)
        for report in reports:
            self.assertTrue(report.passed, str(report))
            self.assertLessEqual(report.max_rel_error, 1e-5)
            self.assertGreater(report.checked, 0)

    def test_network_suite_is_strict(self):
        report, = suite_network(np.random.default_rng(7))
        self.assertTrue(report.passed, str(report))
        self.assertLessEqual(report.max_rel_error, 1e-5)

    def test_conditioned_network_stays_off_kinks(self):
        config = NetworkConfig.tiny()
        rng = np.random.default_rng(3)
        params = ModelParams.from_arrays(config, conditioned_arrays(config, rng)).detached()
        result = forward(params, tiny_sample(rng))
        for cloud in result.latent_clouds[1:]:
            self.assertGreater(cloud.features.data.min(), 1e-3)
        for name, tensor in params.items():
            if not name.endswith('w1'):
                self.assertGreater(tensor.data.min(), 0.0, name)
