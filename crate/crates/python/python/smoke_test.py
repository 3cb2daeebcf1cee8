"""Smoke test for the `recame` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`,
then run `python crates/python/python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import recame


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    counts = [500, 40, 3]
    p = recame.balanced_softmax([0.2, -1.0, 3.0], counts)
    assert close(sum(p), 1.0, 1e-12)

    z = [[1.0, 0.5, -0.3], [0.1, 2.0, 0.0]]
    y = [0, 2]
    assert close(recame.arb_loss(z, y, [7, 7, 7]), recame.cross_entropy(z, y))
    assert close(recame.hcm_loss(z, y, counts, 3), recame.arb_loss(z, y, counts), 1e-12)
    assert recame.kd_all_loss([z, z], counts) < 1e-12
    assert recame.contrastive_loss([[0.0, 0.0], [3.0, 4.0]], [0, 0]) > 0
    assert close(recame.center_loss([[0.0, 0.0], [0.0, 0.0]], [1, 1]), 0.0, 1e-5)

    half = recame.RcAttn(4, reduction=2, zero=True)
    x = [[[float(i + j + k) for k in range(4)] for j in range(7)] for i in range(7)]
    out = half(x)
    assert out[3][5][2] == 0.5 * x[3][5][2]
    assert recame.quadrant_bounds(7, 7)[3] == ((3, 7), (3, 7))

    s = recame.subgroup_accuracy([0] * 100 + [1] * 4 + [0] * 6, [0] * 100 + [1] * 10, [20000, 50])
    assert s["head"] == 1.0 and close(s["few"], 0.4)
    assert recame.majority_minority([0, 1], [0, 0], [20000, 50]) == (0.5, None)

    report = recame.gradcheck("arb", 0)
    assert report["passed"], report

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        stats = recame.generate_dataset(str(tmp / "data"), preset="toy", seed=1)
        assert sum(stats["class_counts"]) == 25
        cfg = recame.default_config()
        cfg.update(epochs=2, batch_size=8, widths=[4, 8], attention=["none", "rc_attn"], reduction=2)
        history = recame.train_model(json.dumps(cfg), str(tmp / "data/manifest.jsonl"), str(tmp / "run"))
        assert len(history) == 2 and history[-1]["lr"] == cfg["lr_min"]
        assert all(math.isfinite(h["losses"]["total"]) for h in history)

        model = recame.Model.load(str(tmp / "run/checkpoints/final"))
        assert model.num_branches == 2 and model.num_classes == 3
        ev = model.evaluate(str(tmp / "data/manifest.jsonl"), subgroups="head=6,many=4,medium=2")
        assert 0.0 <= ev["top1"] <= 1.0 and len(ev["confusion"]) == 3
        rows = model.export_embeddings(str(tmp / "data/manifest.jsonl"), str(tmp / "emb.csv"))
        assert rows == 2 * ev["num_samples"]
        assert len(model.predict([[[0.0] * 64 for _ in range(64)]])) == 1

        assert recame.cli(["gradcheck", "cosine_head"]) == 0
        assert recame.cli(["no-such-command"]) == 1

    try:
        recame.arb_loss(z, [5, 0], counts)
    except ValueError:
        pass
    else:
        raise AssertionError("label outside the class range was accepted")

    print("recame", recame.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
