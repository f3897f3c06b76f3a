"""Smoke test for the `imfa` extension module.

Build and install first, e.g.
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/imfa-*.whl
then run `python python/smoke_test.py`.
"""

import tempfile
from pathlib import Path

import imfa


def main():
    report = imfa.budget()
    assert report["dense"]["token_ratio"] == 21.0
    assert report["imfa"]["tokens"] == 112
    assert imfa.budget(sampling_ratio=0.0)["imfa"]["token_ratio"] == 1.0

    img, boxes, classes = imfa.generate_scene(3, size=64)
    assert (img.height, img.width) == (64, 64)
    assert len(img.data()) == 64 * 64 * 3
    assert len(boxes) == len(classes) >= 1

    perfect = [[(b, c, 1.0) for b, c in zip(boxes, classes)]]
    assert imfa.evaluate(perfect, [(boxes, classes)])["ap"] == 1.0
    assert imfa.evaluate([[]], [(boxes, classes)])["ap"] == 0.0

    assert imfa.hungarian([[4.0, 1.0], [2.0, 0.0], [0.0, 5.0]]) == [(1, 1), (2, 0)]

    try:
        imfa.Model({"model": {"sampling_ratio": 2.0}})
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    config = {
        "model": {"d": 16, "heads": 2, "num_queries": 8, "keypoints": 2, "sampling_ratio": 0.25, "image_size": 64},
        "scenes": {"size": 64},
        "optimizer": {"steps": 3, "batch_size": 2},
        "seed": 1,
    }
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        assert imfa.generate_dataset(str(root / "data"), 4, seed=2, size=64) == 4
        model, metrics = imfa.train(str(root / "data"), config)
        assert [m["step"] for m in metrics] == [1, 2, 3]
        assert all(m["loss"] > 0 for m in metrics)

        logits, pred_boxes = model.infer(img)
        assert len(logits) == 8 and len(logits[0]) == 3
        assert len(pred_boxes) == 8 and len(pred_boxes[0]) == 4
        assert len(model.detect(img, max_detections=5)) == 5

        model.save(str(root / "ckpt"))
        loaded = imfa.Model.load(str(root / "ckpt"))
        assert loaded.parameter_names == model.parameter_names
        assert loaded.infer(img) == (logits, pred_boxes)

        svg = loaded.visualize(img)
        assert svg.count('class="keypoint"') == 2 * 2
        assert svg == model.visualize(img)

        ap = loaded.evaluate(str(root / "data"))["ap"]
        assert 0.0 <= ap <= 1.0

        try:
            imfa.Image.read(str(root / "missing.ppm"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")

    checks = imfa.gradcheck(seed=0)
    assert all(c["passed"] for c in checks), [c for c in checks if not c["passed"]]
    print(f"imfa smoke test passed ({len(checks)} gradient checks)")


if __name__ == "__main__":
    main()
