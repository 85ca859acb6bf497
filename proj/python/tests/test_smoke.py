import csv
import json
import math
import random

import numpy as np
import pytest

import codiff

SMILES = "CNOS()=#c1234"
PROTEIN = "ACDEFGHIKLMNPQRSTVWY"


def write_pairs(path, drugs=15, targets=15, seed=3):
    rng = random.Random(seed)
    smiles = ["".join(rng.choice(SMILES) for _ in range(rng.randint(8, 20))) for _ in range(drugs)]
    seqs = ["".join(rng.choice(PROTEIN) for _ in range(rng.randint(20, 40))) for _ in range(targets)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["drug_id", "smiles", "target_id", "sequence", "affinity"])
        for d in range(drugs):
            for t in range(targets):
                w.writerow([f"D{d}", smiles[d], f"T{t}", seqs[t], f"{5.0 + rng.random() * 3:.3f}"])


def test_schedule_anchor():
    s = codiff.noise_schedule()
    assert len(s["beta"]) == 1000
    assert s["beta"][0] == pytest.approx(1e-4)
    assert s["beta"][-1] == pytest.approx(4e-4)
    assert s["alpha_bar"][-1] == pytest.approx(math.prod(1 - b for b in s["beta"]), abs=1e-12)
    assert s["alpha_bar"][-1] == pytest.approx(0.7788, abs=1e-3)


def test_noise_round_trip():
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((50, 16))
    eps = rng.standard_normal((50, 16))
    k = rng.integers(1, 1001, size=50).tolist()
    zk = codiff.forward_noise(z0, k, eps)
    assert zk.shape == z0.shape
    np.testing.assert_allclose(codiff.reconstruct_z0(zk, eps, k), z0, atol=1e-10)


def test_metric_anchors():
    assert codiff.concordance_index([1, 3, 2], [1, 2, 3]) == pytest.approx(2 / 3)
    assert codiff.rm2([5.0, 6.5, 7.25, 8.0], [5.0, 6.5, 7.25, 8.0]) == pytest.approx(1.0)
    assert codiff.rm2([1, 2, 3], [2, 3, 4]) == pytest.approx(1 - math.sqrt(87 / 841))
    assert codiff.mse([0, 0], [1, -1]) == 1.0
    assert codiff.kd_to_pkd(10000) == pytest.approx(5.0)
    report = codiff.evaluate([5.0, 6.0, 7.0], [5.0, 6.0, 7.0], "ud")
    assert report["setting"] == "ud" and report["ci"] == 1.0


def test_errors_map_to_python_exceptions(tmp_path):
    with pytest.raises(ValueError):
        codiff.mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        codiff.concordance_index([2, 2, 2], [1, 2, 3])
    with pytest.raises(RuntimeError):
        codiff.ingest(tmp_path / "missing.tsv", tmp_path / "out")


def test_pipeline_end_to_end(tmp_path):
    write_pairs(tmp_path / "pairs.tsv")
    manifest = codiff.ingest(tmp_path / "pairs.tsv", tmp_path / "ds")
    assert manifest["records"] == 225 and manifest["drugs"] == 15
    split = codiff.split(tmp_path / "ds", tmp_path / "split", seed=1)
    assert len(split["train"]) == 144
    summaries = codiff.train(
        {
            "epochs": 1,
            "batch_size": 8,
            "model_preset": "compact",
            "dataset_dir": str(tmp_path / "ds"),
            "split_path": str(tmp_path / "split"),
            "checkpoint_dir": str(tmp_path / "ckpt"),
        }
    )
    assert [s["stage"] for s in summaries] == [1, 2]
    ckpt = tmp_path / "ckpt" / "stage2.ckpt"
    rows = codiff.predict(tmp_path / "ds", ckpt, tmp_path / "pred", mode="diff", seed=2)
    assert len(rows) == 225
    assert all(math.isfinite(r["y_hat"]) for r in rows)
    assert rows == codiff.predict(tmp_path / "ds", ckpt, tmp_path / "pred2", mode="diff", seed=2)
    metrics = codiff.evaluate_model(tmp_path / "ds", tmp_path / "split", ckpt, tmp_path / "eval")
    assert json.loads((tmp_path / "eval" / "metrics.json").read_text()) == metrics
    codiff.export_embeddings(tmp_path / "ds", ckpt, tmp_path / "emb")
    assert len((tmp_path / "emb" / "drug_embeddings.csv").read_text().splitlines()) == 16
    codiff.report(tmp_path / "rep", evals=[tmp_path / "eval"])
    assert (tmp_path / "rep" / "summary.csv").read_text().startswith("source,setting,n,mse,mae,ci,rm2")
