"""End-to-end smoke test of the `neft` extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml`, or copy
`target/debug/libneft.so` to `neft.so` somewhere on PYTHONPATH.
"""

import os
import tempfile

import neft


def main():
    cfg = neft.ModelConfig(vocab_size=64, d_model=32, d_hidden=16, n_layers=2, n_classes=3, seed=1)
    reference, planted, teacher = neft.planted_task(cfg)
    train = neft.Dataset.synthetic("planted-neurons", cfg, 512, 10)
    held_out = neft.Dataset.synthetic("planted-neurons", cfg, 256, 11)
    assert teacher.evaluate(held_out)[1] == 1.0

    ft = neft.train(reference, train, seed=3, max_steps=800, learning_rate=0.1, optimizer="sgd")
    scores = neft.similarity(reference, ft)
    assert len(scores) == cfg.neuron_count

    mask = neft.select(reference, ft, len(planted) / cfg.neuron_count)
    print(f"selected {len(mask)} rows, overlap with planted rows {mask.overlap(planted):.2f}")
    assert mask.overlap(planted) >= 0.5

    tuned = neft.train(reference, train, seed=3, max_steps=800, learning_rate=0.1, optimizer="sgd", mask=mask)
    for layer, role, row in cfg.neurons():
        if not mask.contains(layer, role, row):
            assert tuned.neuron_row(layer, role, row) == reference.neuron_row(layer, role, row)
    loss, acc = tuned.evaluate(held_out)
    print(f"masked fine-tune: loss {loss:.3f}, accuracy {acc:.3f}")
    assert acc > 0.9

    a = neft.profile(reference, held_out, max_tokens=500)
    b = neft.profile(tuned, held_out, max_tokens=500)
    delta, buckets = neft.rank_diff(a, b)
    assert sum(delta) == 0 and len(buckets) == 10
    strong, suppressed, indirect = neft.categorize(a, b, mask, threshold=5)
    assert set(suppressed) <= set(strong)
    assert not any(mask.contains(*n) for n in indirect)

    union = mask.union(neft.probe_select(reference, train, 4))
    assert len(union) >= len(mask)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        tuned.save(path)
        assert neft.Model.load(path) == tuned
        mask.save(os.path.join(tmp, "mask.json"))
        assert neft.Mask.load(os.path.join(tmp, "mask.json")).neurons() == mask.neurons()
        assert neft.cli(["eval", "--ckpt", path, "--data", "missing.jsonl"]) == 1

    try:
        neft.Model.load("/nonexistent/model.ckpt")
    except ValueError as e:
        print(f"errors surface as ValueError: {e}")
    else:
        raise AssertionError("expected ValueError")
    print("smoke test passed")


if __name__ == "__main__":
    main()
