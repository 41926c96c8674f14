import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from radu.exceptions import ContractError
from radu.tof import (SPEED_OF_LIGHT, CorrelationFrame, ModulationConfig, PathComponent, PhasorMap, UnwrapPolicy,
                      apply_sensor_noise, distance_to_phase, extract_features, features_from_frame,
                      fit_noise_model, max_distance, phase_to_distance, recover_phasor, synthesize_taps,
                      unwrap_orders, unwrap_two_freq)

SINGLE = ModulationConfig(frequencies=(20e6,))


def single_path(intensity, amplitude, phase, config=SINGLE):
    return PathComponent(intensity=np.full((1, 1), intensity), amplitude=np.full((1, 1), amplitude),
                         phase=np.full((len(config.frequencies), 1, 1), phase))


class ModulationConfigTests(SimpleTestCase):

    def test_defaults(self):
        config = ModulationConfig()
        self.assertEqual(config.frequencies, (70e6, 20e6, 50e6))
        self.assertEqual(len(config.phase_offsets), 4)

    def test_rejects_non_uniform_offsets(self):
        with self.assertRaises(ContractError):
            ModulationConfig(phase_offsets=(0.0, 1.0, math.pi))

    def test_rejects_non_positive_frequency(self):
        with self.assertRaises(ContractError):
            ModulationConfig(frequencies=(20e6, 0.0))

    def test_dict_round_trip(self):
        config = ModulationConfig.uniform((20e6, 50e6), phases=3)
        self.assertEqual(ModulationConfig.from_dict(config.to_dict()), config)


class SynthesisTests(SimpleTestCase):

    def test_single_path_taps(self):
        frame = synthesize_taps([single_path(1.0, 0.5, math.pi / 3)], SINGLE)
        assert_allclose(frame.taps[0, :, 0, 0], [1.25, 0.5670, 0.75, 1.4330], atol=1e-4)

    def test_zero_amplitude_is_constant(self):
        frame = synthesize_taps([single_path(2.0, 0.0, 1.0)], SINGLE)
        assert_allclose(frame.taps, 2.0)

    def test_superposition(self):
        a, b = single_path(1.0, 0.5, 0.3), single_path(0.4, 0.2, 2.0)
        both = synthesize_taps([a, b], SINGLE).taps
        assert_allclose(both, synthesize_taps([a], SINGLE).taps + synthesize_taps([b], SINGLE).taps)

    def test_empty_components_give_zero_frame(self):
        frame = synthesize_taps([], SINGLE, shape=(2, 3))
        self.assertEqual(frame.taps.shape, (1, 4, 2, 3))
        self.assertFalse(frame.taps.any())
        self.assertFalse(recover_phasor(frame).valid.any())

    def test_intensity_below_amplitude(self):
        with self.assertRaises(ContractError):
            single_path(0.2, 0.5, 0.0)

    def test_frame_shape_contract(self):
        with self.assertRaises(ContractError):
            CorrelationFrame(taps=np.zeros((2, 4, 3, 3)), config=SINGLE)


class PhasorTests(SimpleTestCase):

    def test_round_trip(self):
        phasor = recover_phasor(synthesize_taps([single_path(1.0, 0.5, math.pi / 3)], SINGLE))
        self.assertAlmostEqual(phasor.intensity[0, 0, 0], 1.0, delta=1e-12)
        self.assertAlmostEqual(phasor.amplitude[0, 0, 0], 0.5, delta=1e-12)
        self.assertAlmostEqual(phasor.phase[0, 0, 0], math.pi / 3, delta=1e-12)
        self.assertTrue(phasor.valid[0, 0])

    def test_round_trip_over_phase_grid(self):
        amplitude = np.array([0.1, 1.0, 10.0])[:, None]
        phase = (2 * math.pi * np.arange(360) / 360)[None, None, :]
        frame = synthesize_taps([PathComponent(2.0 * amplitude, amplitude, phase)], SINGLE)
        phasor = recover_phasor(frame)
        self.assertEqual(phasor.phase.shape, (1, 3, 360))
        assert_allclose(phasor.intensity[0], np.broadcast_to(2.0 * amplitude, (3, 360)), rtol=0, atol=1e-12)
        assert_allclose(phasor.amplitude[0], np.broadcast_to(amplitude, (3, 360)), rtol=0, atol=1e-12)
        # разность по окружности: 0 и 2π одна и та же фаза
        wrapped = np.angle(np.exp(1j * (phasor.phase[0] - phase[0])))
        assert_allclose(wrapped, 0.0, atol=1e-12)

    def test_zero_phase_taps(self):
        frame = CorrelationFrame(taps=np.array([1.5, 1.0, 0.5, 1.0]).reshape(1, 4, 1, 1), config=SINGLE)
        phasor = recover_phasor(frame)
        assert_allclose([phasor.intensity[0, 0, 0], phasor.amplitude[0, 0, 0], phasor.phase[0, 0, 0]],
                        [1.0, 0.5, 0.0], atol=1e-12)

    def test_constant_taps_invalid(self):
        frame = CorrelationFrame(taps=np.ones((1, 4, 1, 1)), config=SINGLE)
        self.assertFalse(recover_phasor(frame).valid[0, 0])

    def test_needs_three_offsets(self):
        config = ModulationConfig(frequencies=(20e6,), phase_offsets=(0.0, math.pi))
        with self.assertRaises(ContractError):
            recover_phasor(CorrelationFrame(taps=np.ones((1, 2, 1, 1)), config=config))

    def test_phase_range(self):
        rng = np.random.default_rng(0)
        phase = rng.uniform(0, 2 * math.pi, size=(1, 5, 5))
        frame = synthesize_taps([PathComponent(np.ones((5, 5)), np.full((5, 5), 0.7), phase)], SINGLE)
        recovered = recover_phasor(frame).phase
        self.assertTrue(np.all((recovered >= 0) & (recovered < 2 * math.pi)))


class DistanceTests(SimpleTestCase):

    def test_phase_to_distance(self):
        self.assertEqual(phase_to_distance(0.0, 20e6), 0.0)
        self.assertAlmostEqual(float(phase_to_distance(math.pi, 20e6)), 3.7474057, places=6)
        self.assertAlmostEqual(max_distance(20e6), SPEED_OF_LIGHT / 40e6)
        self.assertAlmostEqual(max_distance(20e6), 7.4948114, places=6)

    def test_rejects_non_positive_frequency(self):
        with self.assertRaises(ContractError):
            phase_to_distance(1.0, 0.0)

    def test_distance_phase_inverse(self):
        d = np.linspace(0.0, 7.0, 15)
        assert_allclose(phase_to_distance(distance_to_phase(d, 20e6), 20e6), d, atol=1e-9)


class UnwrapTests(SimpleTestCase):

    def test_no_wrap(self):
        self.assertAlmostEqual(float(unwrap_two_freq(1.0, 20e6, 1.0, 50e6)), 1.0, places=9)

    def test_wrapped_high_frequency(self):
        d_b = 5.0 - max_distance(50e6)
        self.assertAlmostEqual(d_b, 2.00208, places=4)
        self.assertAlmostEqual(float(unwrap_two_freq(5.0, 20e6, d_b, 50e6)), 5.0, delta=1e-6)
        m, n = unwrap_orders(5.0, 20e6, d_b, 50e6)
        self.assertEqual((int(m), int(n)), (0, 1))

    def test_sweep(self):
        truth = np.arange(0.0, 7.4, 0.01)
        d_a = phase_to_distance(distance_to_phase(truth, 20e6), 20e6)
        d_b = phase_to_distance(distance_to_phase(truth, 50e6), 50e6)
        assert_allclose(unwrap_two_freq(d_a, 20e6, d_b, 50e6), truth, atol=1e-6)


class NoiseTests(SimpleTestCase):

    def test_variance_matches_model(self):
        frame = CorrelationFrame(taps=np.full((3, 4, 100, 834), 100.0))
        noisy = apply_sensor_noise(frame, 0.33, -18.4, np.random.default_rng(5))
        self.assertAlmostEqual(float(np.var(noisy.taps)), 14.6, delta=0.15)

    def test_clamped_variance_is_exact(self):
        frame = CorrelationFrame(taps=np.full((3, 4, 2, 2), 10.0))
        noisy = apply_sensor_noise(frame, 0.33, -18.4, np.random.default_rng(5))
        assert_array_equal(noisy.taps, frame.taps)

    def test_deterministic(self):
        frame = CorrelationFrame(taps=np.full((3, 4, 2, 2), 500.0))
        first = apply_sensor_noise(frame, rng=np.random.default_rng(9))
        second = apply_sensor_noise(frame, rng=np.random.default_rng(9))
        assert_array_equal(first.taps, second.taps)

    def test_fit_noise_model(self):
        means = np.linspace(100, 1000, 10)
        gain, intercept = fit_noise_model(means, 0.33 * means - 18.4)
        self.assertAlmostEqual(gain, 0.33, places=9)
        self.assertAlmostEqual(intercept, -18.4, places=6)

    def test_fit_recovers_model_from_noisy_taps(self):
        means = np.linspace(60, 500, 12)
        taps = np.broadcast_to(means[None, None, :, None], (3, 4, means.size, 20000))
        noisy = apply_sensor_noise(CorrelationFrame(taps=taps.copy()), 0.33, -18.4, np.random.default_rng(21))
        samples = noisy.taps.transpose(2, 0, 1, 3).reshape(means.size, -1)
        gain, intercept = fit_noise_model(samples.mean(axis=1), samples.var(axis=1))
        self.assertAlmostEqual(gain, 0.33, delta=0.05 * 0.33)
        self.assertAlmostEqual(intercept, -18.4, delta=0.05 * 18.4)


class MultipathTests(SimpleTestCase):

    def test_two_path_phase_lies_between(self):
        rng = np.random.default_rng(8)
        direct = rng.uniform(0.1, 2.5, size=(1, 1, 200))
        indirect = direct + rng.uniform(0.05, 3.0, size=direct.shape)
        strong = rng.uniform(0.5, 2.0, size=(1, 200))
        weak = strong * rng.uniform(0.05, 1.5, size=strong.shape)
        frame = synthesize_taps([PathComponent(strong, strong, direct), PathComponent(weak, weak, indirect)], SINGLE)
        recovered = recover_phasor(frame).phase
        self.assertTrue(np.all(recovered > direct))
        self.assertTrue(np.all(recovered < indirect))

    def test_uniform_scaling_keeps_phase(self):
        paths = [single_path(1.0, 0.5, 0.4), single_path(0.3, 0.3, 1.9)]
        scaled = [PathComponent(2.0 * p.intensity, 2.0 * p.amplitude, p.phase) for p in paths]
        base, doubled = recover_phasor(synthesize_taps(paths, SINGLE)), recover_phasor(synthesize_taps(scaled, SINGLE))
        assert_allclose(doubled.phase, base.phase, atol=1e-12)
        assert_allclose(doubled.amplitude, 2.0 * base.amplitude, rtol=1e-12)
        assert_allclose(doubled.intensity, 2.0 * base.intensity, rtol=1e-12)


class FeatureTests(SimpleTestCase):

    def phasors(self, distances, amplitudes):
        config = ModulationConfig()
        phase = np.stack([np.full((1, 1), distance_to_phase(d, f)) for d, f in zip(distances, config.frequencies)])
        amplitude = np.asarray(amplitudes, dtype=float).reshape(3, 1, 1)
        return PhasorMap(intensity=np.ones((3, 1, 1)), amplitude=amplitude, phase=phase,
                         valid=np.ones((1, 1), dtype=bool))

    def test_channels(self):
        stack = extract_features(self.phasors((2.0, 2.1, 1.95), (1.0, 0.8, 0.9)))
        assert_allclose(stack.channels[:, 0, 0], [2.0, 0.1, -0.05, -0.2, -0.1], atol=1e-9)
        self.assertEqual(stack.init_distance[0, 0], stack.channels[0, 0, 0])

    def test_identical_phasors(self):
        stack = extract_features(self.phasors((1.5, 1.5, 1.5), (0.7, 0.7, 0.7)))
        assert_allclose(stack.channels[:, 0, 0], [1.5, 0.0, 0.0, 0.0, 0.0], atol=1e-9)

    def test_weak_amplitude_masked(self):
        stack = extract_features(self.phasors((1.0, 1.0, 1.0), (1e-9, 0.5, 0.5)), amplitude_floor=1e-6)
        self.assertFalse(stack.valid[0, 0])
        assert_array_equal(stack.channels[:, 0, 0], 0.0)

    def test_missing_frequency(self):
        phasors = PhasorMap(intensity=np.ones((2, 1, 1)), amplitude=np.ones((2, 1, 1)),
                            phase=np.zeros((2, 1, 1)), valid=np.ones((1, 1), dtype=bool),
                            frequencies=(20e6, 50e6))
        with self.assertRaises(ContractError):
            extract_features(phasors)

    def test_unwrapped_pipeline(self):
        config = ModulationConfig()
        truth = np.array([[0.5, 2.5], [5.0, 7.2]])
        frame = synthesize_taps([PathComponent.from_distance(np.full(truth.shape, 1.0), np.full(truth.shape, 0.5),
                                                             truth, config)], config)
        stack = features_from_frame(frame)
        assert_allclose(stack.init_distance, truth, atol=1e-9)
        assert_allclose(stack.channels[1:], 0.0, atol=1e-9)

    def test_without_unwrapping(self):
        config = ModulationConfig()
        truth = np.full((1, 1), 5.0)
        frame = synthesize_taps([PathComponent.from_distance(np.ones((1, 1)), np.full((1, 1), 0.5), truth,
                                                             config)], config)
        stack = features_from_frame(frame, UnwrapPolicy.none())
        self.assertAlmostEqual(stack.init_distance[0, 0], 5.0 - 2 * max_distance(70e6), places=9)
