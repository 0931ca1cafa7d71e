import dataclasses
import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from blurret import dataset_gen
from blurret.blur_synth import blur_severity
from blurret.dataset_gen import (
    MANIFEST_FIELDS,
    DataConfig,
    DatasetManifest,
    ImageRecord,
    TrajectorySpec,
    category_shape,
    load_alpha,
    make_background,
    make_sprite,
    realize_record,
    sample_trajectory,
    split_counts,
    split_dataset,
    sprite_rng,
)
from blurret.errors import DomainError, InsufficientObjects

from conftest import TINY


class TestSprites:
    def test_same_stream_is_identical(self):
        a = make_sprite(4, 1, sprite_rng(9, 4))
        b = make_sprite(4, 1, sprite_rng(9, 4))
        assert a.rgb.tobytes() == b.rgb.tobytes() and a.mask.tobytes() == b.mask.tobytes()

    def test_category_fixes_silhouette(self):
        a = make_sprite(0, 2, sprite_rng(0, 0))
        b = make_sprite(1, 2, sprite_rng(0, 1))
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not np.array_equal(a.rgb, b.rgb)

    def test_sixty_distinct_sprites(self):
        sprites = [make_sprite(o, o // 5, sprite_rng(0, o)) for o in range(60)]
        for i in range(60):
            for j in range(i + 1, 60):
                a, b = sprites[i], sprites[j]
                if a.rgb.shape == b.rgb.shape:
                    assert np.abs(a.rgb * a.mask[..., None] - b.rgb * b.mask[..., None]).max() > 0

    def test_categories_cycle_families(self):
        families = [category_shape(c)[0] for c in range(6)]
        assert len(set(families)) == 6

    def test_background_range(self):
        bg = make_background(np.random.default_rng(0), (32, 48))
        assert bg.shape == (32, 48, 3) and bg.min() >= 0 and bg.max() <= 1


class TestTrajectory:
    def test_zero_length(self):
        t = sample_trajectory(np.random.default_rng(0), (64, 64), (16, 16), max_length=0.0)
        assert t.full_start == t.full_end

    def test_midpoints_inside(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            t = sample_trajectory(rng, (64, 48), (16, 12))
            r, c = t.midpoint
            assert 8 <= r <= 63 - 8 and 6 <= c <= 47 - 6
            for p in (t.full_start, t.full_end):
                assert 0 <= p[0] <= 63 and 0 <= p[1] <= 47

    def test_length_bounds(self):
        rng = np.random.default_rng(2)
        lengths = [sample_trajectory(rng, (64, 64), (16, 16), 30.0, 10.0).length for _ in range(300)]
        assert min(lengths) >= 10 - 1e-9 and max(lengths) <= 30 + 1e-9

    def test_window_endpoints(self):
        t = TrajectorySpec((0.0, 0.0), (23.0, 46.0)).window(3, 4)
        np.testing.assert_allclose(t.point(4 / 23), [4, 8])
        assert (t.selected_start_index, t.selected_count) == (4, 3)


class TestRealize:
    def setup_method(self):
        self.sprite = make_sprite(0, 0, sprite_rng(0, 0), size=16)  # disk
        self.bg = np.full((64, 64, 3), 0.5)
        self.traj = TrajectorySpec((32.0, 10.0), (32.0, 54.0))

    def test_sharp(self):
        res, ann = realize_record(self.sprite, self.bg, self.traj, 0)
        assert ann.bs == 0.0 and ann.bl == 1
        assert res.alpha.max() == 1.0

    def test_more_subsegments_more_blur(self):
        _, a2 = realize_record(self.sprite, self.bg, self.traj.window(2, 5), 2)
        _, a8 = realize_record(self.sprite, self.bg, self.traj.window(8, 5), 8)
        assert a8.bs > a2.bs

    def test_k_limit(self):
        with pytest.raises(DomainError):
            realize_record(self.sprite, self.bg, self.traj.window(23, 0), 23)
        with pytest.raises(DomainError):
            realize_record(self.sprite, self.bg, self.traj.window(5, 20), 5)


class TestSplit:
    @pytest.mark.parametrize("n,expect", [(10, (7, 1, 2)), (20, (14, 3, 3)), (3, (1, 1, 1)), (7, (4, 1, 2))])
    def test_counts(self, n, expect):
        assert split_counts(n) == expect

    def test_too_few(self):
        with pytest.raises(InsufficientObjects):
            split_counts(2)

    def _manifest(self, n_objects, n_traj=4):
        recs = [
            ImageRecord(f"images/o{o}_t{t}.png", o, 0, t, 0.0, 1, (0.1, 0.1, 0.5, 0.5), True)
            for o in range(n_objects) for t in range(n_traj)
        ]
        return DatasetManifest(recs, seed=5)

    def test_ten_objects(self):
        m = split_dataset(self._manifest(10), queries_per_test_object=2)
        parts = {}
        for r in m.records:
            parts.setdefault(r.split.split("-")[0], set()).add(r.object_id)
        assert [len(parts[k]) for k in ("train", "val", "test")] == [7, 1, 2]
        m.validate()

    def test_queries_are_whole_trajectories(self):
        m = split_dataset(self._manifest(10), queries_per_test_object=20)
        for o in {r.object_id for r in m.split("test-query")}:
            q = {r.trajectory_id for r in m.split("test-query") if r.object_id == o}
            d = {r.trajectory_id for r in m.split("test-database") if r.object_id == o}
            assert q and d and not q & d
            assert len(q) == 3  # capped so one trajectory stays in the database

    def test_insufficient_category(self):
        with pytest.raises(InsufficientObjects):
            split_dataset(self._manifest(2))


class TestBuild:
    def test_tiny_candidates_unsplit(self, tmp_path):
        cfg = dataclasses.replace(TINY, objects_per_category=2, assign_splits=False)
        m = dataset_gen.build_dataset(cfg, 0, tmp_path)
        assert m.n_candidates == 48
        assert 0 < len(m.records) <= 48
        assert {r.split for r in m.records} == {"unassigned"}
        m.validate()

    def test_manifest_file(self, tiny_dataset):
        lines = (tiny_dataset.root / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == len(tiny_dataset.records)
        for line in lines:
            assert set(json.loads(line)) == set(MANIFEST_FIELDS)
        again = DatasetManifest.read(tiny_dataset.root / "manifest.jsonl")
        assert again.records == tiny_dataset.records

    def test_images_decode(self, tiny_dataset):
        for r in tiny_dataset.records[:10]:
            with Image.open(tiny_dataset.root / r.path) as im:
                assert im.mode == "RGBA" and im.size == (64, 64)

    def test_bs_from_stored_alpha(self, tiny_dataset):
        for r in tiny_dataset.records:
            assert abs(blur_severity(load_alpha(tiny_dataset.root, r)) - r.bs) <= 1e-9

    def test_sharp_per_trajectory(self, tiny_dataset):
        sharp = {(r.object_id, r.trajectory_id) for r in tiny_dataset.records if r.is_sharp}
        all_traj = {(r.object_id, r.trajectory_id) for r in tiny_dataset.records}
        assert sharp == all_traj

    def test_deterministic(self, tiny_dataset, tmp_path):
        again = dataset_gen.build_dataset(TINY, seed=11, out_dir=tmp_path)
        assert again.records == tiny_dataset.records
        assert filecmp.cmp(again.root / "manifest.jsonl", tiny_dataset.root / "manifest.jsonl", shallow=False)
        r = tiny_dataset.records[5]
        assert (tmp_path / r.path).read_bytes() == (tiny_dataset.root / r.path).read_bytes()

    def test_from_json_rejects_extra_field(self):
        rec = ImageRecord("images/a.png", 0, 0, 0, 0.0, 1, (0, 0, 1, 1), True)
        row = json.loads(rec.to_json())
        row["extra"] = 1
        with pytest.raises(ValueError):
            ImageRecord.from_json(json.dumps(row))

    def test_validate_catches_leaks(self, tiny_dataset):
        train_obj = tiny_dataset.split("train")[0].object_id
        bad = [dataclasses.replace(r, split="val") if r.object_id == train_obj and r.trajectory_id == 0 else r
               for r in tiny_dataset.records]
        with pytest.raises(ValueError):
            dataclasses.replace(tiny_dataset, records=bad).validate()
        wrong_bl = [dataclasses.replace(tiny_dataset.records[0], bl=5), *tiny_dataset.records[1:]]
        with pytest.raises(ValueError):
            dataclasses.replace(tiny_dataset, records=wrong_bl).validate()


@pytest.mark.slow
def test_desk_config_coverage(tmp_path):
    m = dataset_gen.build_dataset(DataConfig(), seed=0, out_dir=tmp_path)
    by_obj = {}
    for r in m.records:
        by_obj.setdefault(r.object_id, []).append(r)
    assert len(by_obj) == 42
    for recs in by_obj.values():
        assert any(r.is_sharp for r in recs)
        assert len({r.bl for r in recs}) >= 4
    assert set(m.bl_histogram()) == {1, 2, 3, 4, 5, 6}
