"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import tinyvlm

CORPUS = [
    "the dog runs",
    "the dogs run",
    "the cat sleeps",
    "the cats sleep",
    "a red ball",
    "a blue box",
]


def main() -> None:
    tok = tinyvlm.Tokenizer.train(CORPUS, 40)
    assert tok.vocab_size == 40
    specials = tok.specials()
    assert specials == {"pad": 0, "bos": 1, "eos": 2, "unk": 3, "img": 4}
    ids = tok.encode("the dog runs")
    assert tok.decode(ids) == "the dog runs"

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        tok.save(str(root / "tok.json"))
        again = tinyvlm.Tokenizer.load(str(root / "tok.json"))
        assert again.hash() == tok.hash()

        store_path = root / "features.bin"
        tinyvlm.FeatureStore.write(
            {tinyvlm.PLACEHOLDER_KEY: [0.0] * 4, "img_0": [1.0, 0.0, -1.0, 0.5]},
            4,
            str(store_path),
        )
        store = tinyvlm.FeatureStore.open(str(store_path))
        assert len(store) == 2 and store.dim == 4
        assert store.get("img_0") == [1.0, 0.0, -1.0, 0.5]

        config = {
            "n_layers": 1,
            "d_model": 8,
            "n_heads": 2,
            "d_ff": 16,
            "vocab_size": 40,
            "max_len": 16,
            "feat_dim": 4,
        }
        models = []
        for seed in (1, 2):
            m = tinyvlm.Model.init(json.dumps({**config, "seed": seed}))
            path = root / f"m{seed}"
            m.save(str(path), tok.hash(), "text_only" if seed == 1 else "multimodal")
            models.append(path)

        model = tinyvlm.Model.load(str(models[0]))
        assert json.loads(model.meta_json())["modality"] == "text_only"
        prefixed = [specials["bos"], specials["img"]] + ids
        logits = model.logits(prefixed, [0.0] * 4)
        assert len(logits) == len(prefixed) and len(logits[0]) == 40
        lp = model.sentence_logprob(prefixed, [0.0] * 4)
        assert lp < 0 and math.isfinite(lp)

        merged = tinyvlm.merge_checkpoints(str(models[0]), str(models[1]), [0.0, 0.5], str(root / "merged"))
        assert [Path(p).name for p in merged] == ["merged_a0", "merged_a0.5"]
        a0 = tinyvlm.Model.load(merged[0])
        vlm = tinyvlm.Model.load(str(models[1]))
        assert a0.tensor("lm_head") == vlm.tensor("lm_head")

        task = root / "pairs.jsonl"
        task.write_text(
            "\n".join(
                json.dumps({"sentence_good": g, "sentence_bad": b})
                for g, b in [("the dog runs", "the dog run"), ("the cats sleep", "the cats sleeps")]
            )
        )
        report = json.loads(
            tinyvlm.evaluate(merged[1], str(root / "tok.json"), str(task), "minimal-pairs", str(store_path))
        )
        assert report["n_items"] == 2 and report["metric"] == "accuracy"

    assert tinyvlm.estimate_words(136, 1.36) == 100
    assert tinyvlm.schedule_crossings(0, 2_500_000) == [1_000_000, 2_000_000]
    assert abs(tinyvlm.spearman([1, 2, 3, 4], [2, 1, 4, 3]) - 0.6) < 1e-12
    print("python smoke test passed")


if __name__ == "__main__":
    main()
