import numpy as np
import pytest

from blockpred import pseudo_label as pl
from blockpred import worldgen as wg

from conftest import flood_fill_components


def make_flow(h=64, w=64):
    return np.zeros((h, w, 2))


class TestProvideFlow:
    def test_oracle_exact(self):
        frames, gts = wg.simulate_sequence(0, 0, wg.WorldConfig())
        src = pl.OracleFlowSource(gts[0].flow)
        out = pl.provide_flow(frames[0], frames[1], src)
        assert (out == gts[0].flow).all()

    def test_static_scene_zero_flow(self):
        ground = wg.ground_level(64)
        block = wg.Block(np.array([32.0, ground - 4.0]), np.array([5.0, 4.0]),
                         np.array([0.9, 0.1, 0.1]), np.zeros(2))
        frame, gt = wg.render(wg.SceneSpec([block], 0.3, 64))
        out = pl.provide_flow(frame, frame, pl.OracleFlowSource(gt.flow))
        assert not out.any()

    def test_shape_mismatch(self):
        a = np.zeros((64, 64, 3))
        b = np.zeros((32, 32, 3))
        with pytest.raises(pl.ShapeError):
            pl.provide_flow(a, b, pl.OracleFlowSource(make_flow()))


class TestThresholdFlow:
    def test_zero_flow_all_off(self):
        assert not pl.threshold_flow(make_flow()).any()

    def test_uniform_unit_flow_all_on(self):
        flow = make_flow()
        flow[..., 0] = 1.0
        assert pl.threshold_flow(flow).all()  # 1 > 0.01 * 64

    def test_half_pixel_below_threshold(self):
        flow = make_flow()
        flow[5, 5, 1] = 0.5
        assert not pl.threshold_flow(flow).any()  # 0.5 < 0.64

    def test_matches_magnitude_oracle(self):
        rng = np.random.default_rng(1)
        flow = rng.normal(scale=0.5, size=(64, 64, 2))
        got = pl.threshold_flow(flow, 0.01)
        expected = np.sqrt(flow[..., 0] ** 2 + flow[..., 1] ** 2) > 0.64
        assert (got == expected).all()

    def test_monotone_in_fraction(self):
        rng = np.random.default_rng(2)
        flow = rng.normal(scale=1.0, size=(32, 32, 2))
        counts = [pl.threshold_flow(flow, f).sum() for f in (0.005, 0.01, 0.02, 0.05)]
        assert counts == sorted(counts, reverse=True)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            pl.threshold_flow(make_flow(), 0.0)


class TestConnectedComponents:
    def test_empty(self):
        assert pl.connected_components(np.zeros((10, 10), bool)) == []

    def test_two_separated_blocks(self):
        mask = np.zeros((10, 10), bool)
        mask[1:4, 1:4] = True
        mask[1:4, 6:9] = True
        comps = pl.connected_components(mask, min_area=1)
        assert sorted(len(c) for c in comps) == [9, 9]

    def test_diagonal_touch_is_one_component(self):
        mask = np.zeros((5, 5), bool)
        mask[1, 1] = mask[2, 2] = True
        comps = pl.connected_components(mask, min_area=1)
        assert len(comps) == 1

    def test_min_area_filters(self):
        mask = np.zeros((10, 10), bool)
        mask[0, 0] = True
        mask[5:8, 5:8] = True
        comps = pl.connected_components(mask, min_area=8)
        assert len(comps) == 1 and len(comps[0]) == 9

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            mask = rng.random((20, 20)) < 0.35
            got = {frozenset(map(tuple, c))
                   for c in pl.connected_components(mask, min_area=1)}
            expected = {frozenset(c) for c in flood_fill_components(mask)}
            assert got == expected


class TestConvexHullMask:
    def test_single_pixel(self):
        out = pl.convex_hull_mask(np.array([[3, 4]]), 6, 6)
        assert out.sum() == 1 and out[3, 4]

    def test_triangle_filled(self):
        comp = np.array([[0, 0], [0, 4], [4, 0], [0, 1], [0, 2], [0, 3],
                         [1, 0], [2, 0], [3, 0]])
        out = pl.convex_hull_mask(comp, 6, 6)
        assert out[1, 1]
        assert not out[4, 4]

    def test_rectangle_is_own_hull(self):
        mask = np.zeros((12, 12), bool)
        mask[3:7, 2:9] = True
        comp = np.stack(np.nonzero(mask), axis=1)
        assert (pl.convex_hull_mask(comp, 12, 12) == mask).all()

    def test_superset_of_component(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pts = rng.integers(0, 15, size=(rng.integers(1, 12), 2))
            out = pl.convex_hull_mask(pts, 15, 15)
            assert all(out[y, x] for y, x in pts)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pts = rng.integers(0, 18, size=(rng.integers(1, 10), 2))
            h1 = pl.convex_hull_mask(pts, 18, 18)
            h2 = pl.convex_hull_mask(np.stack(np.nonzero(h1), axis=1), 18, 18)
            assert (h1 == h2).all()

    def test_collinear(self):
        out = pl.convex_hull_mask(np.array([[2, 1], [2, 5]]), 8, 8)
        assert (np.stack(np.nonzero(out), axis=1)
                == np.array([[2, 1], [2, 2], [2, 3], [2, 4], [2, 5]])).all()

    def test_empty_raises(self):
        with pytest.raises(pl.EmptyComponentError):
            pl.convex_hull_mask(np.zeros((0, 2)), 8, 8)


class TestAnnotatePair:
    def test_static_scene_empty_record(self):
        ground = wg.ground_level(64)
        block = wg.Block(np.array([32.0, ground - 4.0]), np.array([5.0, 4.0]),
                         np.array([0.9, 0.1, 0.1]), np.zeros(2))
        frame, gt = wg.render(wg.SceneSpec([block], 0.3, 64))
        rec = pl.annotate_pair(frame, frame, pl.OracleFlowSource(gt.flow))
        assert rec.instances == []

    def test_falling_block_iou(self):
        block = wg.Block(np.array([30.0, 20.0]), np.array([6.0, 5.0]),
                         np.array([0.9, 0.1, 0.1]), np.array([0.0, 2.0]))
        scene = wg.SceneSpec([block], gravity=0.0, image_size=64)
        frame, gt = wg.render(scene)
        frame2, _ = wg.render(wg.simulate_step(scene))
        rec = pl.annotate_pair(frame, frame2, pl.OracleFlowSource(gt.flow))
        assert len(rec.instances) == 1
        inst = rec.instances[0]
        gt_hull = pl.convex_hull_mask(np.stack(np.nonzero(gt.masks[0]), axis=1), 64, 64)
        iou = (inst.mask & gt_hull).sum() / (inst.mask | gt_hull).sum()
        assert iou >= 0.7

    def test_two_blocks_moving_apart(self):
        b1 = wg.Block(np.array([15.0, 15.0]), np.array([5.0, 4.0]),
                      np.array([0.9, 0.1, 0.1]), np.array([-2.0, 0.0]))
        b2 = wg.Block(np.array([48.0, 48.0]), np.array([5.0, 4.0]),
                      np.array([0.1, 0.9, 0.1]), np.array([2.0, 0.0]))
        scene = wg.SceneSpec([b1, b2], gravity=0.0, image_size=64)
        frame, gt = wg.render(scene)
        frame2, _ = wg.render(wg.simulate_step(scene))
        rec = pl.annotate_pair(frame, frame2, pl.OracleFlowSource(gt.flow))
        assert len(rec.instances) == 2

    def test_coverage_property(self):
        frames, gts = wg.simulate_sequence(1, 0, wg.WorldConfig())
        rec = pl.annotate_pair(frames[1], frames[2], pl.OracleFlowSource(gts[1].flow))
        moving = pl.threshold_flow(gts[1].flow)
        for inst in rec.instances:
            overlap = inst.mask & moving
            hull = pl.convex_hull_mask(np.stack(np.nonzero(overlap), axis=1), 64, 64)
            assert (inst.mask <= hull).all()

    def test_boxes_tight(self):
        frames, gts = wg.simulate_sequence(2, 0, wg.WorldConfig())
        rec = pl.annotate_pair(frames[0], frames[1], pl.OracleFlowSource(gts[0].flow))
        for inst in rec.instances:
            assert (inst.box == wg.mask_to_box(inst.mask)).all()


class TestExport:
    def test_coco_schema_and_single_class(self, small_dataset, small_annotations):
        records, path = small_annotations
        import json
        with open(path) as f:
            payload = json.load(f)
        coco = payload["coco"]
        assert coco["categories"] == [{"id": 1, "name": "object"}]
        assert all(a["category_id"] == 1 for a in coco["annotations"])
        for a in coco["annotations"]:
            x, y, w, h = a["bbox"]
            assert w > 0 and h > 0
        assert all(i.class_id == 0 for r in records for i in r.instances)

    def test_native_roundtrip(self, small_annotations):
        records, path = small_annotations
        back = pl.load_annotations(path)
        assert len(back) == len(records)
        for a, b in zip(records, back):
            assert a.frame_id == b.frame_id
            assert len(a.instances) == len(b.instances)
            for ia, ib in zip(a.instances, b.instances):
                assert (ia.mask == ib.mask).all()
                assert (ia.box == ib.box).all()
