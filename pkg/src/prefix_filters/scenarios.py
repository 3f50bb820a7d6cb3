"""Synthetic bracket corpus used by the desk-scale demo and tests."""
from __future__ import annotations

import json
import random
from pathlib import Path

__all__ = ["bracket_corpus", "write_demo"]

UNITS = ("()", "[]")


def bracket_corpus(
    n: int = 2000,
    seed: int = 0,
    burst_rate: float = 0.15,
    illegal_rate: float = 0.15,
    max_units: int = 4,
) -> list[str]:
    """Strings of 1..max_units balanced units, some with an injected error.

    A fraction ``burst_rate`` gets a ``]]`` burst at a random position and
    a disjoint fraction ``illegal_rate`` gets a ``#``; the rest stay valid.
    """
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        s = "".join(rng.choice(UNITS) for _ in range(rng.randint(1, max_units)))
        u = rng.random()
        if u < burst_rate:
            k = rng.randint(0, len(s))
            s = s[:k] + "]]" + s[k:]
        elif u < burst_rate + illegal_rate:
            k = rng.randint(0, len(s))
            s = s[:k] + "#" + s[k:]
        out.append(s)
    return out


def write_demo(out_dir: str | Path, seed: int = 0) -> Path:
    """Write a runnable config with its corpus and prompt files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.txt").write_text("\n".join(bracket_corpus(2000, seed)) + "\n", encoding="utf-8")
    reference = bracket_corpus(200, seed + 1, burst_rate=0.0, illegal_rate=0.0)
    (out / "reference.txt").write_text("\n".join(reference) + "\n", encoding="utf-8")
    (out / "learn_prompts.txt").write_text("".join(f"learn task {i}\n" for i in range(10)), encoding="utf-8")
    (out / "eval_prompts.txt").write_text("".join(f"eval task {i}\n" for i in range(10)), encoding="utf-8")
    config = {
        "model": {"type": "ngram", "corpus": "corpus.txt", "order": 2, "smoothing": 0.0},
        "model_id": "ngram2-brackets",
        "domain_id": "brackets",
        "oracle": {"type": "builtin", "name": "balanced_brackets"},
        "synthesizer": {"type": "miner"},
        "learning": {"budget": 200, "rounds": 3, "epsilon": 0.01},
        "decoder": {"max_len": 40, "max_attempts": 1000},
        "reference_corpus": "reference.txt",
        "prompts": {"learn": "learn_prompts.txt", "eval": "eval_prompts.txt"},
        "eval": {"n_per_prompt": 100},
        "out": "runs",
        "seed": seed,
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return out / "config.json"
