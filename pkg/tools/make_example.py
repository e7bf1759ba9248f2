"""Regenerate the bundled 40-area example dataset and its golden outputs.

Run from the repository root::

    python tools/make_example.py

The golden files are frozen; regenerate them only on an intentional
numerical change and review the diff.
"""
import os
import shutil

import numpy as np
import pandas as pd

from linkage_sae import io
from linkage_sae.cli import main
from linkage_sae.simulation import ScenarioConfig, apply_linkage, draw_sample, generate_population

RES = os.path.join("src", "linkage_sae", "resources")
GOLD = os.path.join(RES, "golden")
SEED = 7


def make_data():
    cfg = ScenarioConfig(scenario="eu", base_seed=SEED)
    pop = generate_population(cfg, cfg.rng(0, "population"))
    pop = apply_linkage(pop, cfg.lambdas, cfg.rng(0, "linkage"))
    sample, rows = draw_sample(pop, cfg.n_i, cfg.rng(0, "sample"), cfg.lambdas)
    s, para, agg = io.sample_frames(sample)
    s["area_id"] = [f"A{int(a):02d}" for a in s["area_id"]]
    agg["area_id"] = [f"A{int(a):02d}" for a in agg["area_id"]]
    io.write_frame(s, os.path.join(RES, "example_sample.csv"))
    io.write_frame(para, os.path.join(RES, "example_paradata.csv"))
    io.write_frame(agg, os.path.join(RES, "example_aggregates.csv"))
    # audit: 25 records per block, correctness drawn at the true rates
    rng = np.random.default_rng([SEED, 99])
    blocks = np.repeat(para["block_id"].to_numpy(), 25)
    lam = np.repeat(para["lambda"].to_numpy(), 25)
    audit = pd.DataFrame(
        {"block_id": blocks, "correct": (rng.random(len(blocks)) < lam).astype(int)}
    )
    io.write_frame(audit, os.path.join(RES, "example_audit.csv"))


def make_golden():
    os.makedirs(GOLD, exist_ok=True)
    base = [
        "--sample", os.path.join(RES, "example_sample.csv"),
        "--paradata", os.path.join(RES, "example_paradata.csv"),
        "--aggregates", os.path.join(RES, "example_aggregates.csv"),
    ]
    tmp = os.path.join(GOLD, "_tmp")
    for method in ("eblup-star", "eblup-starstar", "reblup-star", "mq-star"):
        assert main(["fit", *base, "--method", method, "--out", tmp]) == 0
        shutil.copy(os.path.join(tmp, "predictions.csv"), os.path.join(GOLD, f"{method}.csv"))
        shutil.rmtree(tmp)


if __name__ == "__main__":
    make_data()
    make_golden()
