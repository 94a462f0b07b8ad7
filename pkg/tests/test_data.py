import os
import numpy as np
import pytest
from PIL import Image
from cmscan.numerics.tensor import DimensionError, ConfigurationError
from cmscan.numerics.rng import Rng
from cmscan.runtime.configsection import ConfigError
from cmscan.dataendpoint.scene import SamplePair, SceneSpec, MIN_THERMAL_GAP, default_palette, generate_scene, nearest_palette_labels
from cmscan.dataendpoint.loader import DatasetError, DatasetListingError, DatasetSizeError, load_dataset, load_sample, save_sample
from cmscan.dataendpoint.augment import AugmentPolicy, augment
from cmscan.dataendpoint.dataendpoint import DataEndpoint, DataEndpointSynthetic, DataEndpointDirectory, DataEndpointJsonLines,\
    split_indices, sample_name
from cmscan.dataendpoint.dataendpointpool import DataEndpointPool

@pytest.fixture
def quiet_spec():
    return SceneSpec.from_dict({'canvas': 32, 'rgb_noise': 0.0, 'thermal_noise': 0.0})

@pytest.fixture
def sample(quiet_spec):
    return generate_scene(quiet_spec, Rng(0), name='00000')

class TestScene:

    def test_shapes_and_ranges(self):
        sample = generate_scene(SceneSpec.from_dict({'canvas': 64}), Rng(1))
        assert sample.rgb.shape == sample.thermal.shape == (3, 64, 64)
        assert sample.labels.shape == (64, 64)
        assert sample.labels.dtype == np.uint8
        assert sample.labels.max() < 6
        assert 0.0 <= sample.rgb.min() and sample.rgb.max() <= 1.0
        np.testing.assert_array_equal(sample.thermal[0], sample.thermal[2])

    def test_deterministic(self):
        spec = SceneSpec.from_dict({})
        first, second = generate_scene(spec, Rng(4).split(3, 2)), generate_scene(spec, Rng(4).split(3, 2))
        np.testing.assert_array_equal(first.rgb, second.rgb)
        np.testing.assert_array_equal(first.thermal, second.thermal)
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_empty_scene(self):
        spec = SceneSpec.from_dict({'min_shapes': 0, 'max_shapes': 0})
        assert not generate_scene(spec, Rng(0)).labels.any()

    def test_ambiguous_pairs_share_rgb(self, quiet_spec, sample):
        colors, levels = quiet_spec.get_colors(), quiet_spec.get_levels()
        for first, second in quiet_spec.ambiguous_pairs:
            np.testing.assert_array_equal(colors[first], colors[second])
            assert abs(levels[first] - levels[second]) >= MIN_THERMAL_GAP
        for class_id in np.unique(sample.labels):
            mask = sample.labels == class_id
            np.testing.assert_allclose(sample.rgb[:, mask].mean(axis=1), colors[class_id], atol=1e-6)
            np.testing.assert_allclose(sample.thermal[0, mask], levels[class_id], atol=1e-6)

    def test_default_palette(self):
        colors, levels = default_palette(6, [[1, 2]])
        assert colors[0] == [0.5, 0.5, 0.5]
        assert colors[1] == colors[2]
        assert (levels[1], levels[2]) == (0.15, 0.85)
        assert len(set(map(tuple, colors))) == 5

    @pytest.mark.parametrize('settings', [{'canvas': 48}, {'ambiguous_pairs': [[0, 1]]}, {'ambiguous_pairs': [[1, 1]]},\
        {'thermal_levels': [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]}, {'max_shapes': 1, 'min_shapes': 2}, {'shapes': 3}])
    def test_invalid_specs(self, settings):
        with pytest.raises(ConfigError):
            SceneSpec.from_dict(settings)

    def test_misaligned_pair(self):
        with pytest.raises(DimensionError):
            SamplePair(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((4, 5), dtype=np.uint8))

    def test_zero_thermal(self, sample):
        blank = sample.with_zero_thermal()
        assert not blank.thermal.any()
        assert blank.rgb is sample.rgb

    def test_rgb_alone_cannot_separate_ambiguous_pairs(self):
        spec = SceneSpec.from_dict({})
        classes = [class_id for pair in spec.ambiguous_pairs for class_id in pair]
        rgb_only, joint = {class_id: list() for class_id in classes}, {class_id: list() for class_id in classes}
        for index in range(200):
            sample = generate_scene(spec, Rng(11).split(index))
            from_rgb, from_both = nearest_palette_labels(spec, sample.rgb), nearest_palette_labels(spec, sample.rgb, sample.thermal)
            for class_id in classes:
                mask = sample.labels == class_id
                rgb_only[class_id].extend(from_rgb[mask].tolist())
                joint[class_id].extend(from_both[mask].tolist())
            if min(len(rgb_only[class_id]) for class_id in classes) >= 500: break
        for first, second in spec.ambiguous_pairs:
            assert min(len(rgb_only[first]), len(rgb_only[second])) >= 500
            rgb_hits = sum(int(np.sum(np.array(rgb_only[c][:500]) == c)) for c in (first, second))
            joint_hits = sum(int(np.sum(np.array(joint[c][:500]) == c)) for c in (first, second))
            assert rgb_hits <= 500
            assert joint_hits >= 950

    def test_nearest_palette_needs_aligned_thermal(self, quiet_spec):
        with pytest.raises(DimensionError):
            nearest_palette_labels(quiet_spec, np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))

class TestSplits:

    def test_six_one_one(self):
        assert split_indices(8, [6, 1, 1], 'train') == [0, 1, 2, 3, 4, 5]
        assert split_indices(8, [6, 1, 1], 'val') == [6]
        assert split_indices(16, [6, 1, 1], 'test') == [7, 15]

    def test_partition(self):
        parts = [split_indices(23, [3, 2, 1], split) for split in ('train', 'val', 'test')]
        assert sorted(sum(parts, [])) == list(range(23))

    def test_empty_split(self):
        assert split_indices(10, [1, 0, 0], 'val') == []
        assert split_indices(0, [6, 1, 1], 'train') == []

    def test_unknown_split(self):
        with pytest.raises(DatasetError):
            split_indices(4, [1, 1, 1], 'holdout')

    def test_sample_name(self):
        assert sample_name(42) == '00042'

class TestLoader:

    def test_round_trip(self, tmp_path, sample):
        save_sample(sample, str(tmp_path), 'train', 'a')
        index = load_dataset(str(tmp_path), 'train')
        assert index.get_stems() == ['a']
        loaded = load_sample(index[0])
        np.testing.assert_array_equal(loaded.labels, sample.labels)
        np.testing.assert_allclose(loaded.rgb, sample.rgb, atol=0.5 / 255 + 1e-6)
        np.testing.assert_allclose(loaded.thermal, sample.thermal, atol=0.5 / 255 + 1e-6)
        assert loaded.rgb.dtype == np.float32

    def test_empty_split(self, tmp_path):
        os.makedirs(tmp_path / 'val')
        assert len(load_dataset(str(tmp_path), 'val')) == 0

    def test_missing_split(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(str(tmp_path), 'test')

    def test_missing_counterpart(self, tmp_path, sample):
        save_sample(sample, str(tmp_path), 'train', 'lonely')
        os.remove(tmp_path / 'train' / 'thermal' / 'lonely.png')
        with pytest.raises(DatasetListingError, match='lonely'):
            load_dataset(str(tmp_path), 'train')

    def test_size_mismatch(self, tmp_path):
        generate = lambda canvas: generate_scene(SceneSpec.from_dict({'canvas': canvas}), Rng(0))
        save_sample(generate(64), str(tmp_path), 'train', 'x')
        Image.fromarray(generate(32).labels, mode='L').save(tmp_path / 'train' / 'labels' / 'x.png')
        with pytest.raises(DatasetSizeError):
            load_dataset(str(tmp_path), 'train')

    def test_color_label_map(self, tmp_path, sample):
        save_sample(sample, str(tmp_path), 'train', 'c')
        Image.new('RGB', (32, 32)).save(tmp_path / 'train' / 'labels' / 'c.png')
        with pytest.raises(DatasetError):
            load_sample(load_dataset(str(tmp_path), 'train')[0])

class TestAugment:

    def test_identity_policy(self, sample):
        result = augment(sample, Rng(0), AugmentPolicy.from_dict({'hflip': 0.0}))
        np.testing.assert_array_equal(result.rgb, sample.rgb)
        np.testing.assert_array_equal(result.labels, sample.labels)

    def test_flip_reverses_columns(self, sample):
        result = augment(sample, Rng(0), AugmentPolicy.from_dict({'hflip': 1.0}))
        np.testing.assert_array_equal(result.labels, sample.labels[:, ::-1])
        np.testing.assert_array_equal(result.thermal, sample.thermal[:, :, ::-1])

    def test_crop_is_reproducible(self, sample):
        policy = AugmentPolicy.from_dict({'scale_range': [1.0, 1.5], 'crop_size': [32, 32]})
        first, second = augment(sample, Rng(9), policy), augment(sample, Rng(9), policy)
        assert first.labels.shape == (32, 32)
        np.testing.assert_array_equal(first.labels, second.labels)
        np.testing.assert_array_equal(first.rgb, second.rgb)

    def test_resized_labels_keep_class_ids(self, sample):
        result = augment(sample, Rng(2), AugmentPolicy.from_dict({'scale_range': [1.5, 1.5], 'crop_size': [32, 32]}))
        assert set(np.unique(result.labels)) <= set(np.unique(sample.labels))

    @pytest.mark.parametrize('seed, hflip', [(0, 0.0), (1, 1.0), (2, 0.5)])
    def test_maps_stay_aligned(self, seed, hflip):
        # every pixel carries its source row and column in all three maps
        rows, cols = np.mgrid[0:16, 0:16].astype(np.float64)
        rgb = np.stack([cols / 15, rows / 15, np.full((16, 16), 0.25)])
        thermal = np.stack([cols / 15, rows / 15, np.full((16, 16), 0.75)])
        tagged = SamplePair(rgb, thermal, (16 * rows + cols).astype(np.uint8))
        policy = AugmentPolicy.from_dict({'scale_range': [1.25, 1.5], 'crop_size': [16, 16], 'hflip': hflip})
        result = augment(tagged, Rng(seed), policy)
        label_rows, label_cols = np.divmod(result.labels.astype(np.int64), 16)
        np.testing.assert_array_equal(result.thermal[:2], result.rgb[:2])
        assert np.abs(result.rgb[0] * 15 - label_cols).max() <= 0.5 + 1e-9
        assert np.abs(result.rgb[1] * 15 - label_rows).max() <= 0.5 + 1e-9

    def test_crop_larger_than_image(self, sample):
        with pytest.raises(ConfigurationError):
            augment(sample, Rng(0), AugmentPolicy.from_dict({'crop_size': [64, 64]}))

    def test_invalid_policy(self):
        with pytest.raises(ConfigError):
            AugmentPolicy.from_dict({'hflip': 2.0})

class TestEndpoints:

    def test_synthetic_endpoint(self, quiet_spec):
        train = DataEndpointSynthetic(scene=quiet_spec, seed=0, count=8, split='train')
        val = DataEndpointSynthetic(scene=quiet_spec, seed=0, count=8, split='val')
        assert (train.get_size(), val.get_size()) == (6, 1)
        assert val.load_sample(0).name == '00006'
        again = DataEndpointSynthetic(scene=quiet_spec, seed=0, count=8, split='train', split_ratios=[1, 0, 0])
        np.testing.assert_array_equal(again.load_sample(3).labels, train.load_sample(3).labels)

    def test_directory_endpoint(self, tmp_path, sample):
        save_sample(sample, str(tmp_path), 'test', 'b')
        endpoint = DataEndpointDirectory(root=str(tmp_path), split='test')
        assert endpoint.get_size() == 1
        assert [labels.shape for labels in endpoint.get_label_maps()] == [(32, 32)]

    def test_json_lines(self, tmp_path):
        path = str(tmp_path / 'metrics.jsonl')
        endpoint = DataEndpointJsonLines(output_file=path)
        endpoint.store(DataEndpoint.record(1, 'train', loss=0.5, lr=None))
        endpoint.store(DataEndpoint.record(2, 'train', loss=0.25))
        assert endpoint.load_records() == [{'step': 1, 'rec': 'train', 'loss': 0.5}, {'step': 2, 'rec': 'train', 'loss': 0.25}]
        assert DataEndpointJsonLines(output_file=path, truncate=True).get_size() == 0

class TestPool:

    def make_pool(self, spec, **kwargs):
        return DataEndpointPool(loader=DataEndpointSynthetic(scene=spec, seed=0, count=5, split='train', split_ratios=[1, 0, 0]), saver=None, **kwargs)

    def test_batch_shapes(self, quiet_spec):
        rgb, thermal, labels = self.make_pool(quiet_spec).load_batch([0, 3])
        assert rgb.shape == thermal.shape == (2, 3, 32, 32)
        assert labels.shape == (2, 32, 32)

    def test_zero_thermal(self, quiet_spec):
        _, thermal, _ = self.make_pool(quiet_spec, zero_thermal=True).load_batch([1])
        assert not thermal.any()

    def test_threaded_loading_matches(self, quiet_spec):
        policy = AugmentPolicy.from_dict({'scale_range': [1.0, 1.25], 'crop_size': [32, 32]})
        single = self.make_pool(quiet_spec).load_batch([0, 1, 2], rng=Rng(3), policy=policy)
        threaded = self.make_pool(quiet_spec, n_jobs=2).load_batch([0, 1, 2], rng=Rng(3), policy=policy)
        for a, b in zip(single, threaded):
            np.testing.assert_array_equal(a, b)

    def test_positions_cover_each_epoch(self, quiet_spec):
        pool = self.make_pool(quiet_spec)
        positions = [position for step in range(5) for position in pool.sample_positions(step, 2, Rng(1))]
        assert sorted(positions[:5]) == list(range(5))
        assert sorted(positions[5:]) == list(range(5))
        assert pool.sample_positions(3, 2, Rng(1)) == positions[6:8]

    def test_iterate_batches(self, quiet_spec):
        sizes = [len(labels) for _, _, labels in self.make_pool(quiet_spec).iterate_batches(2)]
        assert sizes == [2, 2, 1]
