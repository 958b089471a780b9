"""End-to-end smoke tests of the Python surface.

Small-budget versions of the core workflows: scene synthesis, annotation
parsing, matching and loss values, denoising queries, metrics, and a short
train/eval/infer round trip. Numeric ground truth is asserted only where a
value is cheap to state exactly; everything else checks shapes, ranges, and
determinism.
"""

import json
import math

import numpy as np
import pytest

import dtlsd


def test_synth_generate_contract():
    scenes = dtlsd.synth_generate(seed=11, count=3, size=64)
    assert len(scenes) == 3
    for s in scenes:
        img, lines = s["image"], s["lines"]
        assert img.shape == (64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert lines.ndim == 2 and lines.shape[1] == 4
        assert 2 <= lines.shape[0] <= 12
        assert lines.min() >= 0.0 and lines.max() <= 1.0
    again = dtlsd.synth_generate(seed=11, count=3, size=64)
    assert np.array_equal(scenes[0]["image"], again[0]["image"])
    assert np.array_equal(scenes[2]["lines"], again[2]["lines"])


def test_synth_generate_rejects_bad_size():
    with pytest.raises(Exception):
        dtlsd.synth_generate(seed=0, count=1, size=60)


def test_wireframe_parse_normalizes():
    text = json.dumps(
        [
            {
                "filename": "a.png",
                "width": 640,
                "height": 480,
                "lines": [[0, 0, 640, 480], [320, 120, 160, 120]],
            }
        ]
    )
    records, warnings = dtlsd.wireframe_parse(text)
    assert warnings == []
    assert len(records) == 1
    lines = records[0]["lines"]
    assert np.allclose(lines[0], [0.0, 0.0, 1.0, 1.0])
    # endpoints come back canonicalized (lexicographic order)
    assert np.allclose(lines[1], [0.25, 0.25, 0.5, 0.25])


def test_hungarian_matches_small_case():
    cost = np.array([[1.0, 2.0], [2.0, 1.0], [9.0, 9.0]])
    out = dtlsd.hungarian(cost)
    assert out["gt_for_pred"] == [0, 1, -1]
    assert out["pred_for_gt"] == [0, 1]
    assert out["total_cost"] == pytest.approx(2.0)


def test_loss_values():
    # p = 0.5 makes both focal factors 0.25 * ln 2 apart from the extra
    # (1 - p) down-weight on the no-line branch.
    assert dtlsd.focal_loss(0.5, True) == pytest.approx(0.25 * math.log(2.0))
    assert dtlsd.focal_loss(0.5, False) == pytest.approx(
        0.25 * 0.25 * math.log(2.0)
    )
    pred = np.array([[0.25, 0.3, 0.5, 0.75]])
    gt = np.array([[0.2, 0.3, 0.6, 0.7]])
    assert dtlsd.line_l1(pred, gt, matched=True) == pytest.approx(0.2)
    assert dtlsd.line_l1(pred, gt, matched=False) == 0.0


def test_denoising_batch_shapes_and_ranges():
    gt = np.array([[0.35, 0.45, 0.65, 0.55], [0.2, 0.2, 0.2, 0.7]])
    out = dtlsd.denoising_batch(gt, seed=5, dn_number=12, n_match=10)
    n_dn = out["group_count"] * out["group_size"]
    assert out["group_size"] == 2 * len(gt)
    assert out["anchors"].shape == (n_dn, 4)
    assert len(out["records"]) == n_dn
    assert out["mask"].shape == (n_dn + 10, n_dn + 10)
    # matching queries never blocked from each other
    assert not out["mask"][n_dn:, n_dn:].any()
    # denoising groups hidden from the matching queries
    assert out["mask"][n_dn:, :n_dn].all()
    for rec in out["records"]:
        assert 0 <= rec["gt_index"] < len(gt)
        if rec["positive"]:
            assert abs(rec["rotation"]) < math.radians(7.0)
        else:
            assert math.radians(7.0) <= abs(rec["rotation"]) < math.radians(14.0)


def test_metrics_perfect_and_miss():
    dets = np.array([[0.1, 0.1, 0.5, 0.5, 0.9]])
    gts = np.array([[0.1, 0.1, 0.5, 0.5]])
    assert dtlsd.structural_ap([(dets, gts)], 10.0) == pytest.approx(1.0)
    far = np.array([[0.8, 0.8, 0.9, 0.9, 0.9]])
    assert dtlsd.structural_ap([(far, gts)], 10.0) == pytest.approx(0.0)
    report = dtlsd.evaluate([(dets, gts)], taus=[5, 10, 15])
    assert report["sAP"] == {5: 1.0, 10: 1.0, 15: 1.0}
    assert 0.0 <= report["APH"] <= 1.0


def test_train_eval_infer_round_trip(tmp_path):
    data = tmp_path / "data"
    ckpt = tmp_path / "model.ckpt"
    dtlsd.write_dataset(str(data), seed=21, count=2, size=64)
    assert (data / "annotations.json").exists()

    cfg = json.loads(dtlsd.toy_config())
    cfg["model"].update(
        {
            "d": 8,
            "heads": 2,
            "points": 2,
            "encoder_layers": 1,
            "decoder_layers": 1,
            "query_count": 16,
            "ffn_dim": 16,
            "levels": [2, 3],
        }
    )
    cfg["dn"]["dn_number"] = 4
    cfg["backbone_channels"] = 4
    cfg["batch_size"] = 2
    cfg["epochs"] = 8

    log = dtlsd.train(json.dumps(cfg), str(data), str(ckpt), steps=4)
    assert [e["step"] for e in log] == [1, 2, 3, 4]
    assert all(math.isfinite(e["loss"]) for e in log)
    assert all(e["loss_dn"] > 0.0 for e in log)

    meta = dtlsd.checkpoint_meta(str(ckpt))
    assert meta["step"] == 4
    assert json.loads(meta["config"])["model"]["d"] == 8
    assert any(name == "label_embed" for name, _ in meta["tensors"])

    report = dtlsd.evaluate_checkpoint(str(ckpt), str(data))
    assert set(report["sAP"]) == {5, 10, 15}

    scenes = dtlsd.synth_generate(seed=21, count=1, size=64)
    dets = dtlsd.infer(str(ckpt), scenes[0]["image"])
    assert dets.shape == (16, 5)
    assert ((dets[:, 4] > 0.0) & (dets[:, 4] < 1.0)).all()
    # inference is a pure function of checkpoint + image
    assert np.array_equal(dets, dtlsd.infer(str(ckpt), scenes[0]["image"]))


def test_complexity_slopes_smoke():
    slopes = dtlsd.complexity_slopes(tokens=[64, 256], d=8, repeats=2, seed=3)
    assert set(slopes) == {"global", "deformable"}
    assert slopes["global"] > slopes["deformable"]
