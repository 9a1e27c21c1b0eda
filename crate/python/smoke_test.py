"""End-to-end check of the bindings on a tiny synthetic corpus.

Build and install first:

    maturin develop --release -m crates/python/Cargo.toml
    python python/smoke_test.py
"""

import math
import os
import tempfile

import tricon_py as t


def main():
    assert abs(t.entropy(0.5) - math.log(2)) < 1e-12
    assert t.confidence(0.2) == 0.8

    with tempfile.TemporaryDirectory() as d:
        data = os.path.join(d, "d.mgc3")
        cfg = {"synthetic": {"n_real": 40, "n_fake": 40}, "train": {"epochs": 1}}
        n = t.generate(data, config=cfg, seed=3)
        assert n == 80, n
        index = t.read_index(data)
        assert len(index) == 80 and sum(label for _, label, _ in index) == 40

        det = t.Detector.train(data, config=cfg, seed=3)
        assert len(det.history["epochs"]) == 1
        assert det.config["hidden"] > 0

        ckpt = os.path.join(d, "m.ckpt")
        det.save(ckpt)
        again = t.Detector.load(ckpt)

        val = again.predict(data, split="val")
        test, bundles = again.predict_with_bundles(data, split="test")
        assert [r["p_fake"] for r in test] == [r["p_fake"] for r in det.predict(data)]
        assert all(0.0 <= r["p_fake"] <= 1.0 for r in test)
        assert len(bundles) == len(test)

        routing = t.route(val, test, strategy="difficulty", ratio=0.25, provider="synthetic:0.95:1")
        assert routing["evaluation"]["n"] == len(test)
        report = t.analyze(test, bundles, routing=routing, seed=1)
        assert report["n"] == len(test)

        try:
            t.Detector.load(data)
        except t.DataError:
            pass
        else:
            raise AssertionError("loading a feature container as a checkpoint should fail")
        try:
            t.read_index(os.path.join(d, "missing.mgc3"))
        except t.UserError:
            pass
        else:
            raise AssertionError("missing file should raise UserError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
