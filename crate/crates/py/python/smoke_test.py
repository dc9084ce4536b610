"""Smoke test for the affectkit extension module.

Build and run:

    cargo build -p affectkit-py --features extension-module
    cp target/debug/libaffectkit.so crates/py/python/affectkit.so
    python3 crates/py/python/smoke_test.py [--pipeline configs/toy.toml]

or install with `pip install --no-build-isolation ./crates/py` (needs maturin).
"""

import argparse
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import affectkit as ak  # noqa: E402


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def check_metrics():
    f1s = [0.5, 0.6, 0.7, 0.4, 0.3, 0.5, 0.6, 0.4]
    assert close(ak.score_expr(f1s), sum(f1s) / 8)
    assert close(ak.ccc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 1.0)
    assert close(ak.pcc([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]), 1.0)
    rep = ak.score_va([0.1, 0.2, 0.3], [0.0, 0.5, 1.0], [0.1, 0.2, 0.3], [0.0, 0.5, 1.0])
    assert close(rep.aggregate, 1.0), rep
    assert ak.f1_per_class([[1, 0], [0, 1]], [[1, 0], [0, 1]]) == [1.0, 1.0]
    assert ak.task_outputs("va") == ["valence", "arousal"]


def check_losses():
    loss = ak.au_loss([[0.9, 0.1]], [[1.0, 0.0]])
    assert loss > 0 and math.isfinite(loss)
    assert ak.va_loss([0.1, 0.4], [0.2, 0.3], [0.1, 0.4], [0.2, 0.3]) < 1e-9
    assert len(ak.class_weights([10, 30, 60])) == 3


def check_smoothing():
    series = [[float(i % 3)] for i in range(20)]
    for kind in ("none", "gaussian", "median", "average"):
        out = ak.smooth(series, kind, task="va")
        assert len(out) == 20
    const = [[0.25, -0.5]] * 15
    assert ak.smooth(const, "gaussian", sigma=2.0) == const
    filled = ak.fill_missing({1: [1.0], 4: [4.0]}, 6)
    assert [r[0] for r in filled] == [1.0, 1.0, 1.0, 4.0, 4.0, 4.0]


def check_splits():
    folds = ak.make_folds(["a", "b", "c", "d", "e"], 5, 7)
    assert sorted(folds.values()) == [0, 1, 2, 3, 4]
    assert ak.mask_count(196, 0.75) == 147
    mask = ak.sample_mask(224, 16, 0.75, 3, channels=3)
    assert sum(mask) == 147 and len(mask) == 196
    assert ak.clip_windows(250, 100)[-1] == (200, 50)


def check_errors():
    try:
        ak.score_au([0.1])
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
    try:
        ak.evaluate_files("/nonexistent/p.csv", "/nonexistent/l.csv", "au")
    except OSError:
        pass
    else:
        raise AssertionError("expected OSError")


def run_pipeline(config):
    with tempfile.TemporaryDirectory() as tmp:
        text = open(config).read()
        cfg = os.path.join(tmp, "config.toml")
        with open(cfg, "w") as f:
            f.write(text.replace('work_dir = "runs/toy"', 'work_dir = "run"'))
        p = ak.Pipeline(cfg)
        losses = p.pretrain()
        print(f"pretrain: {losses[0]:.4f} -> {losses[-1]:.4f}")
        p.finetune("au")
        p.fuse_train("au")
        print("predictions:", p.predict("au"))
        rep = p.evaluate("au")
        print("au aggregate:", round(rep.aggregate, 4))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pipeline", metavar="CONFIG")
    args = ap.parse_args()
    check_metrics()
    check_losses()
    check_smoothing()
    check_splits()
    check_errors()
    print("bindings ok")
    if args.pipeline:
        run_pipeline(args.pipeline)


if __name__ == "__main__":
    main()
