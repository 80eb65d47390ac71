import json

import numpy as np
import pytest
from PIL import Image

from semfield.dataset import EmbeddingTable, SceneDataset
from semfield.encoding import HashGridConfig
from semfield.errors import (BudgetError, FormatError, InvalidInputError,
                             StaleCacheError)
from semfield.geometry import CameraIntrinsics, DepthImage, Point3, Pose
from semfield.network import FieldModel, forward_semantic, forward_visual
from semfield.query import (CandidateGrid, LabelMap, QueryEmbedding,
                            build_candidate_grid, locate_query,
                            localize_image, noise_flip, query_scores,
                            read_query_file, save_heatmap_csv,
                            save_heatmap_ply, save_label_map, segment_view,
                            write_query_file)

UNIT_AABB = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def tiny_model(seed=0, aabb=UNIT_AABB, out_semantic=4, out_visual=4):
    cfg = HashGridConfig(levels=2, features=2, table_log2=5, base_resolution=4)
    return FieldModel.initialize(cfg, aabb, out_semantic, out_visual,
                                 hidden=8, seed=seed)


def hand_grid(model, f_rows, h_rows, spacing=0.5):
    """CandidateGrid with hand-picked cached values, valid for model."""
    f = np.asarray(f_rows, dtype=np.float32)
    h = np.asarray(h_rows, dtype=np.float32)
    n = len(f)
    points = np.stack([np.arange(n) * spacing] * 3, axis=1)
    return CandidateGrid(points, f, h, spacing, model.fingerprint())


class TestQueryEmbedding:
    def test_needs_a_part(self):
        with pytest.raises(InvalidInputError):
            QueryEmbedding()

    def test_zero_vector_rejected(self):
        with pytest.raises(InvalidInputError):
            QueryEmbedding(semantic=np.zeros(4))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            QueryEmbedding(visual=np.array([1.0, np.nan]))

    def test_parts_stored_float32(self):
        q = QueryEmbedding(semantic=np.arange(3, dtype=np.float64),
                           visual=[0.0, 1.0])
        assert q.semantic.dtype == np.float32 and q.semantic.shape == (3,)
        assert q.visual.dtype == np.float32


class TestBuildCandidateGrid:
    def test_unit_box_half_meter_gives_27(self):
        grid = build_candidate_grid(tiny_model(), spacing=0.5)
        assert len(grid) == 27
        axis = np.unique(grid.points[:, 0])
        assert np.array_equal(axis, [0.0, 0.5, 1.0])

    def test_lattice_covers_bounds(self):
        aabb = np.array([[-0.0099, 0.02, 0.5], [1.0099, 0.93, 0.5]])
        grid = build_candidate_grid(tiny_model(aabb=aabb), spacing=0.05)
        lo = grid.points.min(axis=0)
        hi = grid.points.max(axis=0)
        assert np.all(lo <= aabb[0] + 1e-12) and np.all(hi >= aabb[1] - 1e-12)
        # Coordinates are integer multiples of the spacing.
        steps = grid.points / 0.05
        assert np.allclose(steps, np.round(steps), atol=1e-9)
        # x runs -0.05..1.05 (23 steps), y 0.0..0.95 (20), z 0.5 exactly (1).
        assert len(grid) == 23 * 20 * 1

    def test_points_ordered_x_major(self):
        grid = build_candidate_grid(tiny_model(), spacing=0.5)
        # First block holds x=0 with z varying fastest.
        assert np.array_equal(grid.points[0], [0.0, 0.0, 0.0])
        assert np.array_equal(grid.points[1], [0.0, 0.0, 0.5])
        assert np.array_equal(grid.points[3], [0.0, 0.5, 0.0])
        assert np.array_equal(grid.points[9], [0.5, 0.0, 0.0])

    def test_cached_values_match_direct_forward(self):
        model = tiny_model(seed=3)
        grid = build_candidate_grid(model, spacing=0.25)
        assert np.allclose(grid.f_values,
                           forward_semantic(grid.points, model), atol=1e-6)
        assert np.allclose(grid.h_values,
                           forward_visual(grid.points, model), atol=1e-6)
        assert grid.fingerprint == model.fingerprint()

    def test_budget_error_suggests_coarser_spacing(self):
        with pytest.raises(BudgetError, match="spacing"):
            build_candidate_grid(tiny_model(), spacing=0.001)

    def test_custom_budget(self):
        with pytest.raises(BudgetError):
            build_candidate_grid(tiny_model(), spacing=0.5, point_budget=26)

    def test_bad_spacing(self):
        with pytest.raises(InvalidInputError):
            build_candidate_grid(tiny_model(), spacing=0.0)


class TestLocateQuery:
    def test_exact_match_scores_one(self):
        model = tiny_model()
        f = np.eye(3, 4)
        grid = hand_grid(model, f, f)
        hits = locate_query(QueryEmbedding(semantic=f[1]), grid, model, k=1)
        point, score = hits[0]
        assert point.x == 0.5 and score == pytest.approx(1.0, abs=1e-7)

    def test_tie_returns_lower_lattice_index_first(self):
        model = tiny_model()
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        grid = hand_grid(model, rows, rows)
        hits = locate_query(QueryEmbedding(semantic=np.array([1.0, 0.0])),
                            grid, model, k=3)
        assert [h[0].x for h in hits] == [0.0, 1.0, 0.5]

    def test_mean_of_both_parts(self):
        model = tiny_model()
        f = np.array([[1.0, 0.0], [0.0, 1.0]])
        h = np.array([[0.0, 1.0], [1.0, 0.0]])
        grid = hand_grid(model, f, h)
        q = QueryEmbedding(semantic=np.array([1.0, 0.0]),
                           visual=np.array([1.0, 0.0]))
        # Point 0: mean(1, 0) = 0.5; point 1: mean(0, 1) = 0.5 -> tie by index.
        hits = locate_query(q, grid, model, k=2)
        assert [h[1] for h in hits] == [0.5, 0.5]
        assert hits[0][0].x == 0.0
        # Weight 1.0 reduces to the semantic score alone.
        assert query_scores(q, grid, semantic_weight=1.0).tolist() == [1.0, 0.0]

    def test_k_clamps_to_lattice_size(self):
        model = tiny_model()
        f = np.eye(2)
        grid = hand_grid(model, f, f)
        assert len(locate_query(QueryEmbedding(semantic=f[0]), grid, model, k=99)) == 2
        with pytest.raises(InvalidInputError):
            locate_query(QueryEmbedding(semantic=f[0]), grid, model, k=0)

    def test_stale_grid_rejected(self):
        model = tiny_model()
        f = np.eye(2)
        grid = hand_grid(model, f, f)
        other = tiny_model(seed=9)
        with pytest.raises(StaleCacheError):
            locate_query(QueryEmbedding(semantic=f[0]), grid, other, k=1)

    def test_dim_mismatch(self):
        model = tiny_model()
        grid = hand_grid(model, np.eye(3), np.eye(3))
        with pytest.raises(InvalidInputError):
            locate_query(QueryEmbedding(semantic=np.ones(5)), grid, model, k=1)

    def test_scaling_query_preserves_ranking(self):
        # Raw dot products: scaling by lambda scales scores, order fixed.
        model = tiny_model()
        for seed in range(5):
            rng = np.random.default_rng(seed)
            rows = rng.normal(size=(40, 4)).astype(np.float32)
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            grid = hand_grid(model, rows, rows)
            e = rng.normal(size=4)
            e /= np.linalg.norm(e)
            base = locate_query(QueryEmbedding(semantic=e), grid, model, k=10)
            for lam in (0.1, 10.0):
                scaled = locate_query(QueryEmbedding(semantic=lam * e),
                                      grid, model, k=10)
                assert [p.as_array().tolist() for p, _ in scaled] == \
                       [p.as_array().tolist() for p, _ in base]
                for (_, s_scaled), (_, s_base) in zip(scaled, base):
                    assert s_scaled == pytest.approx(lam * s_base, rel=1e-6)


class TestLocalizeImage:
    def test_threshold_minus_one_returns_everything(self):
        model = tiny_model()
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        grid = hand_grid(model, rows, rows)
        hits = localize_image(np.array([1.0, 0.0]), grid, model, threshold=-1.0)
        assert len(hits) == 3
        assert [h[1] for h in hits] == [1.0, 0.0, -1.0]

    def test_threshold_above_max_is_empty(self):
        model = tiny_model()
        rows = np.eye(2)
        grid = hand_grid(model, rows, rows)
        assert localize_image(np.array([1.0, 0.0]), grid, model, threshold=1.1) == []

    def test_matches_ranking_prefix(self):
        model = tiny_model(seed=4)
        grid = build_candidate_grid(model, spacing=0.25)
        rng = np.random.default_rng(11)
        e = rng.normal(size=4)
        e /= np.linalg.norm(e)
        ranked = locate_query(QueryEmbedding(visual=e), grid, model, k=len(grid))
        for threshold in (-0.5, 0.0, 0.2):
            subset = localize_image(e, grid, model, threshold=threshold)
            prefix = [r for r in ranked if r[1] >= threshold]
            assert len(subset) == len(prefix)
            for (pa, sa), (pb, sb) in zip(subset, prefix):
                assert pa == pb and sa == sb

    def test_stale_grid_rejected(self):
        model = tiny_model()
        grid = hand_grid(model, np.eye(2), np.eye(2))
        with pytest.raises(StaleCacheError):
            localize_image(np.array([1.0, 0.0]), grid, tiny_model(seed=5), 0.5)


def constant_field_model():
    """Zeroed hash tables make the trunk, hence both heads, constant.

    Head biases are bumped off zero so the constant output has a norm.
    """
    model = tiny_model()
    for t in model.grid.tables:
        t[...] = 0.0
    for head in (model.head_semantic, model.head_visual):
        head.b1[...] = 0.5
        head.b2[...] = np.linspace(0.2, 1.0, head.b2.size)
    return model


class TestSegmentView:
    K = CameraIntrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
    POSE = Pose(rotation=np.eye(3), translation=np.zeros(3))

    def test_constant_field_labels_everything_alike(self):
        model = constant_field_model()
        direction = forward_semantic(np.array([[0.2, 0.2, 0.2]]), model)[0]
        other = np.zeros(4)
        other[np.argmin(np.abs(direction))] = 1.0
        other = other - direction * (direction @ other)
        rows = np.stack([other, other, direction])
        depth = DepthImage.from_millimeters(np.full((6, 8), 500, np.uint16))
        out = segment_view(depth, self.POSE, self.K, rows, model)
        assert np.all(out.ids == 2)
        assert np.allclose(out.scores, 1.0, atol=1e-6)

    def test_all_invalid_depth_gives_sentinel_map(self):
        depth = DepthImage.from_millimeters(np.zeros((6, 8), np.uint16))
        out = segment_view(depth, self.POSE, self.K, np.eye(4), tiny_model())
        assert np.all(out.ids == -1)
        assert np.all(out.scores == 0.0)

    def test_partial_validity(self):
        mm = np.zeros((6, 8), np.uint16)
        mm[2, 3] = 700
        depth = DepthImage.from_millimeters(mm)
        out = segment_view(depth, self.POSE, self.K, np.eye(4), tiny_model())
        assert out.ids[2, 3] >= 0
        assert (out.ids == -1).sum() == 47

    def test_equals_manual_composition(self):
        model = tiny_model(seed=6, aabb=np.array([[-2.0, -2.0, 0.0], [2.0, 2.0, 2.0]]))
        rng = np.random.default_rng(8)
        mm = rng.integers(0, 1500, size=(6, 8)).astype(np.uint16)
        depth = DepthImage.from_millimeters(mm)
        rows = rng.normal(size=(5, 4)).astype(np.float32)
        out = segment_view(depth, self.POSE, self.K, rows, model)
        from semfield.geometry import backproject_frame_arrays
        pixels, points = backproject_frame_arrays(depth, self.K, self.POSE)
        sims = forward_semantic(points, model) @ rows.T
        for (u, v), row in zip(pixels, sims):
            assert out.ids[v, u] == np.argmax(row)
            assert out.scores[v, u] == np.float32(row[np.argmax(row)])

    def test_tie_takes_lowest_label_index(self):
        model = constant_field_model()
        direction = forward_semantic(np.array([[0.5, 0.5, 0.5]]), model)[0]
        rows = np.stack([direction, direction])
        depth = DepthImage.from_millimeters(np.full((6, 8), 900, np.uint16))
        out = segment_view(depth, self.POSE, self.K, rows, model)
        assert np.all(out.ids == 0)

    def test_empty_labels_rejected(self):
        depth = DepthImage.from_millimeters(np.full((6, 8), 500, np.uint16))
        with pytest.raises(InvalidInputError):
            segment_view(depth, self.POSE, self.K, np.zeros((0, 4)), tiny_model())

    def test_dim_mismatch_rejected(self):
        depth = DepthImage.from_millimeters(np.full((6, 8), 500, np.uint16))
        with pytest.raises(InvalidInputError):
            segment_view(depth, self.POSE, self.K, np.eye(7), tiny_model())


class TestLabelMapExport:
    def test_raster_and_legend_round_trip(self, tmp_path):
        ids = np.array([[0, 1], [2, -1]], dtype=np.int16)
        scores = np.zeros((2, 2), dtype=np.float32)
        lm = LabelMap(ids, scores, 3)
        path = tmp_path / "seg.png"
        save_label_map(lm, ["floor", "wall", "chair"], path)
        raster = np.asarray(Image.open(path))
        assert raster.dtype == np.uint8
        assert raster.tolist() == [[0, 1], [2, 255]]
        legend = json.loads((tmp_path / "seg.json").read_text())
        assert legend["labels"] == {"0": "floor", "1": "wall", "2": "chair"}
        assert legend["sentinel"] == 255

    def test_name_count_must_match(self, tmp_path):
        lm = LabelMap(np.zeros((2, 2), np.int16), np.zeros((2, 2), np.float32), 3)
        with pytest.raises(InvalidInputError):
            save_label_map(lm, ["only-one"], tmp_path / "seg.png")

    def test_too_many_labels_for_eight_bits(self, tmp_path):
        lm = LabelMap(np.zeros((1, 1), np.int16), np.zeros((1, 1), np.float32), 300)
        with pytest.raises(InvalidInputError):
            save_label_map(lm, [str(i) for i in range(300)], tmp_path / "x.png")

    def test_label_map_validates_ids(self):
        with pytest.raises(InvalidInputError):
            LabelMap(np.array([[5]], np.int16), np.zeros((1, 1), np.float32), 3)
        with pytest.raises(InvalidInputError):
            LabelMap(np.array([[-2]], np.int16), np.zeros((1, 1), np.float32), 3)


def group_dataset(n_groups, records_per_group=1, n_labels=4, seed=0):
    rng = np.random.default_rng(seed)
    n = n_groups * records_per_group
    emb_ids = np.repeat(np.arange(n_groups, dtype=np.uint32), records_per_group)
    label_ids = np.repeat(
        rng.integers(0, n_labels, size=n_groups).astype(np.uint32),
        records_per_group,
    )
    labels = [f"label{i}" for i in range(n_labels)]
    tables = EmbeddingTable(
        labels,
        np.eye(n_labels, 8, dtype=np.float32),
        np.ones((n_groups, 8), dtype=np.float32),
    )
    return SceneDataset(
        positions=rng.uniform(0, 1, size=(n, 3)).astype(np.float32),
        label_ids=label_ids,
        confidences=np.full(n, 0.8, np.float32),
        image_emb_ids=emb_ids,
        distances=np.full(n, 1.0, np.float32),
        tables=tables,
        aabb=UNIT_AABB,
    )


class TestNoiseFlip:
    def test_p_zero_is_identity(self):
        ds = group_dataset(50)
        out = noise_flip(ds, 0.0, seed=1)
        assert np.array_equal(out.label_ids, ds.label_ids)
        assert out.label_ids is not ds.label_ids
        assert out.tables is ds.tables

    def test_p_one_flips_every_group(self):
        ds = group_dataset(200)
        out = noise_flip(ds, 1.0, seed=2)
        assert np.all(out.label_ids != ds.label_ids)
        assert out.label_ids.max() < 4

    def test_groups_flip_atomically(self):
        ds = group_dataset(60, records_per_group=5)
        out = noise_flip(ds, 0.5, seed=3)
        for gid in range(60):
            group = out.label_ids[ds.image_emb_ids == gid]
            assert len(np.unique(group)) == 1

    def test_flip_fraction_within_binomial_bound(self):
        # 1000 groups at p = 0.3: 3 sigma = 3 * sqrt(.3 * .7 / 1000) ~ 0.0435.
        ds = group_dataset(1000)
        out = noise_flip(ds, 0.3, seed=4)
        flipped = np.mean(out.label_ids != ds.label_ids)
        assert abs(flipped - 0.3) < 0.0435

    def test_deterministic_in_seed(self):
        ds = group_dataset(100)
        a = noise_flip(ds, 0.4, seed=7)
        b = noise_flip(ds, 0.4, seed=7)
        c = noise_flip(ds, 0.4, seed=8)
        assert np.array_equal(a.label_ids, b.label_ids)
        assert not np.array_equal(a.label_ids, c.label_ids)

    def test_flips_uniform_over_other_labels(self):
        ds = group_dataset(3000, n_labels=3, seed=5)
        out = noise_flip(ds, 1.0, seed=6)
        # Each original label flips to each of the 2 others about half the time.
        for orig in range(3):
            sel = ds.label_ids == orig
            counts = np.bincount(out.label_ids[sel], minlength=3)
            assert counts[orig] == 0
            others = counts[counts > 0]
            assert np.all(np.abs(others / sel.sum() - 0.5) < 0.06)

    def test_invalid_probability(self):
        ds = group_dataset(5)
        for p in (-0.1, 1.5):
            with pytest.raises(InvalidInputError):
                noise_flip(ds, p)

    def test_single_label_scene(self):
        ds = group_dataset(5, n_labels=1)
        with pytest.raises(InvalidInputError):
            noise_flip(ds, 0.2)
        out = noise_flip(ds, 0.0)
        assert np.array_equal(out.label_ids, ds.label_ids)


class TestQueryFiles:
    def test_round_trip_both_parts(self, tmp_path):
        sem = np.linspace(-1, 1, 6).astype(np.float32)
        vis = np.array([0.25, -0.5, 0.125], dtype=np.float32)
        path = tmp_path / "q.sfq"
        write_query_file(path, semantic=sem, visual=vis)
        q = read_query_file(path)
        assert np.array_equal(q.semantic, sem)
        assert np.array_equal(q.visual, vis)
        assert q.source == str(path)

    def test_round_trip_single_part(self, tmp_path):
        path = tmp_path / "v.sfq"
        write_query_file(path, visual=np.ones(4, np.float32))
        q = read_query_file(path)
        assert q.semantic is None and q.visual.shape == (4,)

    def test_layout_semantic_section_first(self, tmp_path):
        path = tmp_path / "q.sfq"
        write_query_file(path, semantic=np.ones(2, np.float32),
                         visual=np.ones(3, np.float32))
        raw = path.read_bytes()
        # 16-byte header: magic, dims u32, kind u8, 7 zero bytes.
        assert raw[:4] == b"SFQ1"
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8] == 0 and raw[9:16] == bytes(7)
        second = 16 + 2 * 4
        assert raw[second:second + 4] == b"SFQ1"
        assert raw[second + 8] == 1
        assert len(raw) == second + 16 + 3 * 4

    def test_byte_swapped_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.sfq"
        write_query_file(path, semantic=np.ones(2, np.float32))
        raw = bytearray(path.read_bytes())
        raw[:4] = raw[:4][::-1]
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_query_file(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.sfq"
        write_query_file(path, semantic=np.ones(4, np.float32))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="truncated"):
            read_query_file(path)

    def test_duplicate_kind_rejected(self, tmp_path):
        path = tmp_path / "dup.sfq"
        write_query_file(path, visual=np.ones(2, np.float32))
        path.write_bytes(path.read_bytes() * 2)
        with pytest.raises(FormatError, match="duplicate"):
            read_query_file(path)

    def test_unknown_kind_rejected(self, tmp_path):
        path = tmp_path / "kind.sfq"
        write_query_file(path, semantic=np.ones(2, np.float32))
        raw = bytearray(path.read_bytes())
        raw[8] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="kind"):
            read_query_file(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.sfq"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            read_query_file(path)

    def test_write_needs_a_part(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_query_file(tmp_path / "none.sfq")


class TestHeatmapExports:
    RESULTS = [(Point3(0.5, 0.25, 1.0), 0.875), (Point3(-1.0, 0.0, 2.5), 0.125)]

    def test_csv_layout(self, tmp_path):
        path = tmp_path / "heat.csv"
        save_heatmap_csv(self.RESULTS, path)
        assert path.read_text() == (
            "x,y,z,score\n"
            "0.5,0.25,1.0,0.875\n"
            "-1.0,0.0,2.5,0.125\n"
        )

    def test_ply_layout_and_colors(self, tmp_path):
        path = tmp_path / "heat.ply"
        save_heatmap_ply(self.RESULTS, path)
        raw = path.read_bytes()
        header, _, body = raw.partition(b"end_header\n")
        assert b"format binary_little_endian 1.0" in header
        assert b"element vertex 2" in header
        rec = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3), ("score", "<f4")])
        rows = np.frombuffer(body, dtype=rec)
        assert np.allclose(rows["xyz"][0], [0.5, 0.25, 1.0])
        assert rows["rgb"][0].tolist() == [255, 0, 0]  # highest score: red
        assert rows["rgb"][1].tolist() == [0, 0, 255]  # lowest score: blue
        assert rows["score"].tolist() == [0.875, 0.125]

    def test_ply_empty_results(self, tmp_path):
        path = tmp_path / "empty.ply"
        save_heatmap_ply([], path)
        raw = path.read_bytes()
        assert b"element vertex 0" in raw
        assert raw.endswith(b"end_header\n")

    def test_ply_constant_scores_colored_red(self, tmp_path):
        path = tmp_path / "flat.ply"
        save_heatmap_ply([(Point3(0, 0, 0), 0.5), (Point3(1, 1, 1), 0.5)], path)
        body = path.read_bytes().partition(b"end_header\n")[2]
        rec = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3), ("score", "<f4")])
        rows = np.frombuffer(body, dtype=rec)
        assert np.all(rows["rgb"][:, 0] == 255)
