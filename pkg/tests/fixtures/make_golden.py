"""Regenerate the golden model fixture.

    python tests/fixtures/make_golden.py

Writes ``golden_model.fnfm`` (an FNFM with BN over the schema of
``golden_rows.csv``, parameters drawn from a seeded normal so every block
matters) and ``golden_predictions.json`` with the probabilities it assigns
to the three rows. Only rerun this when the file format changes on purpose.
"""

import json
from pathlib import Path

import numpy as np

from fnfm import store
from fnfm.data import infer_schema, read_header
from fnfm.models import ModelSpec, build_model

HERE = Path(__file__).parent
ROWS = HERE / "golden_rows.csv"
MODEL = HERE / "golden_model.fnfm"
PINNED = HERE / "golden_predictions.json"


def golden_schema():
    return infer_schema(read_header(ROWS), {"hour_of_day": "numeric"}, hash_buckets=7)


def build():
    model = build_model(ModelSpec("FNFM", embedding_dim=2, hidden_layout=(4,)), golden_schema(), seed=11)
    rng = np.random.default_rng(2024)
    for block in model.params.values():
        block[...] = rng.normal(0.0, 0.5, block.shape)
    model.bn.running_mean[...] = rng.normal(0.0, 0.1, model.bn.width)
    model.bn.running_var[...] = rng.uniform(0.5, 1.5, model.bn.width)
    return model


def main():
    store.save(build(), MODEL)
    model = store.load(MODEL)
    from fnfm.cli import run
    out = HERE / "_golden_out"
    run(["predict", "--model", str(MODEL), "--input", str(ROWS), "--output", str(out / "p.txt"),
         "--out", str(out)])
    probs = [float(line) for line in (out / "p.txt").read_text().split()]
    PINNED.write_text(json.dumps({"probabilities": [repr(p) for p in probs]}, indent=2) + "\n")
    for f in out.iterdir():
        f.unlink()
    out.rmdir()
    print(model.spec, probs)


if __name__ == "__main__":
    main()
