import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from radu.datagen import (Box, DomainParams, Plane, SceneSpec, Sphere, baseline_mae, generate_dataset, load_sample,
                          load_split, raycast_scene, render_components, render_sample, sample_scene, split_counts)
from radu.exceptions import ContractError
from radu.formats import read_json, read_rten
from radu.geometry import CameraIntrinsics, ray_grid
from radu.network import Sample
from radu.tof import (CorrelationFrame, ModulationConfig, NoiseSource, features_from_frame, max_distance,
                      phase_to_distance, recover_phasor, synthesize_taps)

FORWARD = np.array([[0.0, 0.0, 1.0]])
CORNER = (Plane((0.0, 0.0, 1.0), 3.0, 0.8), Plane((0.0, 1.0, 0.0), 1.0, 0.8), Plane((1.0, 0.0, 0.0), -1.2, 0.8))


class SurfaceTests(SimpleTestCase):

    def test_plane(self):
        plane = Plane((0.0, 0.0, 1.0), 2.0, 0.5)
        assert_allclose(plane.intersect(FORWARD), [2.0])
        self.assertTrue(np.isinf(plane.intersect(np.array([[1.0, 0.0, 0.0]]))[0]))
        self.assertTrue(np.isinf(Plane((0.0, 0.0, 1.0), -1.0, 0.5).intersect(FORWARD)[0]))

    def test_box(self):
        box = Box((-1.0, -1.0, 2.0), (1.0, 1.0, 3.0), 0.5)
        assert_allclose(box.intersect(FORWARD), [2.0])
        aside = Box((0.5, -1.0, 2.0), (1.0, 1.0, 3.0), 0.5)
        self.assertTrue(np.isinf(aside.intersect(FORWARD)[0]))

    def test_sphere(self):
        sphere = Sphere((0.0, 0.0, 5.0), 1.0, 0.5)
        assert_allclose(sphere.intersect(FORWARD), [4.0])
        self.assertTrue(np.isinf(sphere.intersect(np.array([[1.0, 0.0, 0.0]]))[0]))

    def test_empty_scene(self):
        with self.assertRaises(ContractError):
            SceneSpec(surfaces=())


class RaycastTests(SimpleTestCase):

    def test_back_wall(self):
        intr = CameraIntrinsics.from_fov(4, 4)
        hits = raycast_scene(SceneSpec(surfaces=(Plane((0.0, 0.0, 1.0), 3.0, 0.4),)), intr)
        self.assertTrue(hits.valid.all())
        assert_allclose(hits.distance, 3.0 / ray_grid(intr)[..., 2])
        assert_allclose(hits.points[..., 2], 3.0)
        assert_array_equal(hits.albedo, 0.4)

    def test_nearest_surface_wins(self):
        intr = CameraIntrinsics.from_fov(4, 4)
        scene = SceneSpec(surfaces=(Plane((0.0, 0.0, 1.0), 3.0, 0.4), Plane((0.0, 0.0, 1.0), 2.0, 0.7)))
        hits = raycast_scene(scene, intr)
        assert_array_equal(hits.surface, 1)
        assert_array_equal(hits.albedo, 0.7)

    def test_miss(self):
        hits = raycast_scene(SceneSpec(surfaces=(Plane((0.0, 0.0, 1.0), -1.0, 0.4),)),
                             CameraIntrinsics.from_fov(3, 2))
        self.assertFalse(hits.valid.any())
        assert_array_equal(hits.distance, 0.0)

    def test_direct_path_recovers_distance(self):
        intr = CameraIntrinsics.from_fov(6, 5)
        scene = SceneSpec(surfaces=(Plane((0.0, 0.0, 1.0), 3.5, 0.5), Sphere((0.0, 0.0, 2.0), 0.5, 0.8)))
        rendered = render_sample(scene, intr, ModulationConfig(), np.random.default_rng(0))
        features = features_from_frame(rendered.frame)
        self.assertTrue(features.valid[rendered.mask].all())
        assert_allclose(features.init_distance[rendered.mask], rendered.gt_distance[rendered.mask], atol=1e-6)

    def test_interreflection_biases_distance(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        clean = render_sample(SceneSpec(surfaces=CORNER), intr, ModulationConfig(), np.random.default_rng(0))
        mixed = render_sample(SceneSpec(surfaces=CORNER, g_mpi=0.5), intr, ModulationConfig(),
                              np.random.default_rng(0))
        assert_array_equal(clean.gt_distance, mixed.gt_distance)
        self.assertFalse(np.allclose(clean.frame.taps, mixed.frame.taps))

    def test_interreflection_overestimates_at_lowest_frequency(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        config = ModulationConfig()
        hits = raycast_scene(SceneSpec(surfaces=CORNER, g_mpi=0.5), intr)
        direct, indirect = render_components(SceneSpec(surfaces=CORNER, g_mpi=0.5), intr, config,
                                             np.random.default_rng(0), hits=hits)
        lowest = config.frequencies.index(min(config.frequencies))
        range_m = max_distance(config.frequencies[lowest])
        indirect_distance = phase_to_distance(indirect.phase[lowest], config.frequencies[lowest])
        affected = hits.valid & (indirect.amplitude > 0) & (indirect_distance > hits.distance)
        self.assertGreater(np.count_nonzero(affected), 10)
        phasor = recover_phasor(synthesize_taps([direct, indirect], config))
        recovered = phase_to_distance(phasor.phase[lowest], config.frequencies[lowest])
        self.assertTrue(np.all(hits.distance[affected] < range_m))
        self.assertTrue(np.all(recovered[affected] > hits.distance[affected]))
        self.assertTrue(np.all(recovered[affected] < indirect_distance[affected]))

    def test_doubling_albedo_keeps_phase(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        dim = tuple(Plane(p.normal, p.offset, p.albedo / 2) for p in CORNER)
        rendered = [render_sample(SceneSpec(surfaces=s), intr, ModulationConfig(), np.random.default_rng(0))
                    for s in (dim, CORNER)]
        low, high = (recover_phasor(r.frame) for r in rendered)
        mask = rendered[0].mask
        assert_allclose(high.phase[:, mask], low.phase[:, mask], atol=1e-12)
        assert_allclose(high.amplitude[:, mask], 2.0 * low.amplitude[:, mask], rtol=1e-12)
        assert_allclose(high.intensity[:, mask], 2.0 * low.intensity[:, mask], rtol=1e-12)

    def test_signal_scale_keeps_phase_with_interreflection(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        scene = SceneSpec(surfaces=CORNER, g_mpi=0.4)
        low, high = (recover_phasor(render_sample(scene, intr, ModulationConfig(), np.random.default_rng(3),
                                                  signal_scale=scale).frame)
                     for scale in (4000.0, 8000.0))
        assert_allclose(high.phase[:, low.valid], low.phase[:, low.valid], atol=1e-9)
        assert_allclose(high.amplitude, 2.0 * low.amplitude, rtol=1e-12, atol=1e-9)


class DomainTests(SimpleTestCase):

    def test_by_label(self):
        self.assertEqual(DomainParams.by_label('source'), DomainParams.source())
        self.assertEqual(DomainParams.by_label('target').label, 'target')
        with self.assertRaises(ContractError):
            DomainParams.by_label('other')

    def test_dict_round_trip(self):
        domain = DomainParams.target()
        self.assertEqual(DomainParams.from_dict(domain.to_dict()), domain)

    def test_invalid_ranges(self):
        with self.assertRaises(ContractError):
            DomainParams(g_range=(0.5, 0.1))
        with self.assertRaises(ContractError):
            DomainParams(albedo_range=(0.0, 0.5))

    def test_scene_respects_domain(self):
        rng = np.random.default_rng(4)
        domain = DomainParams.target()
        for _ in range(20):
            scene = sample_scene(rng, domain)
            self.assertTrue(0.2 <= scene.g_mpi <= 0.6)
            for surface in scene.surfaces:
                self.assertTrue(0.05 <= surface.albedo <= 0.6)
            rotation = np.asarray(scene.rotation)
            assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)


class DatasetTests(SimpleTestCase):

    def test_split_counts(self):
        self.assertEqual(split_counts(200), (160, 20, 20))
        self.assertEqual(split_counts(10), (8, 1, 1))
        self.assertEqual(split_counts(5), (5, 0, 0))

    def test_layout_and_manifest(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            manifest = generate_dataset(10, DomainParams.source(), intr, out, seed=7)
            self.assertEqual(manifest['counts'], {'train': 8, 'val': 1, 'test': 1})
            self.assertEqual(manifest['splits']['test'], ['00009'])
            self.assertEqual(read_json(out / 'manifest.json')['splits'], manifest['splits'])
            sample_dir = out / 'train' / '00000'
            for name in ('taps.rten', 'gt.rten', 'mask.rten', 'meta.json'):
                self.assertTrue((sample_dir / name).exists(), name)
            taps = read_rten(sample_dir / 'taps.rten')
            self.assertEqual(taps.shape, (3, 4, 8, 8))
            self.assertEqual(taps.dtype, np.float32)
            meta = read_json(sample_dir / 'meta.json')
            self.assertEqual(meta['split'], 'train')
            self.assertEqual(meta['intrinsics']['width'], 8)
            self.assertAlmostEqual(meta['intrinsics']['fx'], intr.fx)

    def test_same_seed_same_scenes(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            generate_dataset(3, DomainParams.source(), intr, Path(first), seed=1)
            generate_dataset(3, DomainParams.source(), intr, Path(second), seed=1)
            for sample_id in ('00000', '00002'):
                assert_array_equal(read_rten(Path(first) / 'train' / sample_id / 'taps.rten'),
                                   read_rten(Path(second) / 'train' / sample_id / 'taps.rten'))

    def test_noise_applied_at_load(self):
        intr = CameraIntrinsics.from_fov(8, 8)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            manifest = generate_dataset(10, DomainParams.source(), intr, out, seed=2)
            noisy = load_split(out, 'train', seed=3)
            again = load_split(out, 'train', seed=3)
            other = load_split(out, 'train', seed=4)
            clean = load_split(out, 'test', noisy=False)
        self.assertEqual(len(noisy), 8)
        assert_array_equal(noisy[0].features.channels, again[0].features.channels)
        self.assertFalse(np.array_equal(noisy[0].features.channels, other[0].features.channels))
        self.assertAlmostEqual(baseline_mae(clean), manifest['clean_baseline_mae_m']['test'], delta=1e-4)

    def test_missing_split(self):
        with tempfile.TemporaryDirectory() as tmp:
            generate_dataset(1, DomainParams.source(), CameraIntrinsics.from_fov(4, 4), Path(tmp), seed=0)
            with self.assertRaises(ContractError):
                load_split(Path(tmp), 'holdout')

    def test_no_scenes(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(ContractError):
            generate_dataset(0, DomainParams.source(), CameraIntrinsics.from_fov(4, 4), Path(tmp), seed=0)

    def test_baseline_without_labels(self):
        self.assertTrue(np.isnan(baseline_mae([])))


class BaselineTests(SimpleTestCase):
    """MAE базового ToF на сгенерированных датасетах."""

    def baseline(self, domain, n, size, split='train', noisy=False, seed=5):
        with tempfile.TemporaryDirectory() as tmp:
            generate_dataset(n, domain, CameraIntrinsics.from_fov(size, size), Path(tmp), seed=seed)
            return baseline_mae(load_split(Path(tmp), split, seed=seed, noisy=noisy))

    def test_without_interreflection_is_exact(self):
        self.assertLess(self.baseline(DomainParams(g_range=(0.0, 0.0)), 3, 8), 1e-6)

    def test_grows_with_interreflection(self):
        weak = self.baseline(DomainParams(g_range=(0.0, 0.1)), 5, 12)
        strong = self.baseline(DomainParams(g_range=(0.4, 0.5)), 5, 12)
        self.assertGreater(weak, 0.0)
        self.assertGreater(strong, weak)

    def test_source_and_target_differ(self):
        source = self.baseline(DomainParams.source(), 30, 12, noisy=True)
        target = self.baseline(DomainParams.target(), 30, 12, noisy=True)
        self.assertGreaterEqual(max(source, target) / min(source, target), 1.2)


class OnlineNoiseTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = Path(self.tmp.name)
        generate_dataset(2, DomainParams.source(), CameraIntrinsics.from_fov(8, 8), self.out, seed=6)

    def test_keeps_clean_frame_and_fixed_view(self):
        online = load_split(self.out, 'train', seed=1, online_noise=True)
        fixed = load_split(self.out, 'train', seed=1)
        for sample, plain in zip(online, fixed):
            self.assertIsNotNone(sample.noise_source)
            self.assertIsNone(plain.noise_source)
            assert_array_equal(sample.features.channels, plain.features.channels)
            assert_array_equal(sample.noise_source.frame.taps,
                               read_rten(self.out / 'train' / sample.sample_id / 'taps.rten'))

    def test_draws_differ_and_repeat_per_rng(self):
        source = load_split(self.out, 'train', seed=1, online_noise=True)[0].noise_source
        first = source.draw(np.random.default_rng(0)).channels
        assert_array_equal(first, source.draw(np.random.default_rng(0)).channels)
        self.assertFalse(np.array_equal(first, source.draw(np.random.default_rng(1)).channels))

    def test_needs_noisy_loading(self):
        with self.assertRaises(ContractError):
            load_split(self.out, 'train', noisy=False, online_noise=True)

    def test_clean_load_has_no_source(self):
        sample = load_sample(self.out / 'train' / '00000')
        self.assertIsNone(sample.noise_source)

    def test_source_grid_must_match(self):
        sample = load_split(self.out, 'train', seed=1)[0]
        frame = CorrelationFrame(taps=np.zeros((3, 4, 4, 4)))
        with self.assertRaises(ContractError):
            Sample(features=sample.features, gt_distance=sample.gt_distance, mask=sample.mask,
                   intrinsics=sample.intrinsics, noise_source=NoiseSource(frame))
