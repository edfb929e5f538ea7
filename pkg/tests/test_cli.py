"""End-to-end pipeline runs, exit-code contract, config handling."""

import numpy as np
import pytest

from lora_da.bundle import read_bundle
from lora_da.cli import main

FAST = [
    "--n-odd", "400", "--n-even", "200", "--epochs", "1",
    "--pretrain-epochs", "1", "--eval-max", "200",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Toy data plus a pretrained checkpoint, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "ckpt.ldb"
    assert main(["make-toy-data", "--out", str(data), "--train-n", "2000", "--seed", "5"]) == 0
    assert main(["pretrain", "--data", str(data), "--out", str(ckpt), "--seed", "5"] + FAST) == 0
    return root, data, ckpt


def run_stats(workspace, out, extra=()):
    root, data, ckpt = workspace
    return main(
        ["stats", "--model-checkpoint", str(ckpt), "--data", str(data),
         "--samples", "64", "--out", str(out), "--seed", "5",
         "--n-odd", "400", "--n-even", "200"] + list(extra)
    )


class TestStats:
    def test_writes_expected_entries(self, workspace, tmp_path):
        out = tmp_path / "stats.ldb"
        assert run_stats(workspace, out) == 0
        bundle = read_bundle(out)
        for lid in (0, 1):
            for suffix in ("G", "Zfisher", "Yfisher"):
                assert bundle.has(f"layer.{lid}.{suffix}")
        assert bundle.meta["sample_count"] == 64
        assert bundle.meta["n_total"] == 200

    def test_zero_samples_usage_error(self, workspace, tmp_path):
        assert run_stats(workspace, tmp_path / "x.ldb", extra=["--samples", "0"]) == 64

    def test_byte_reproducible(self, workspace, tmp_path):
        a, b = tmp_path / "a.ldb", tmp_path / "b.ldb"
        assert run_stats(workspace, a) == 0
        assert run_stats(workspace, b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_checkpoint_is_io_error(self, workspace, tmp_path):
        root, data, _ = workspace
        code = main(["stats", "--model-checkpoint", str(tmp_path / "nope.ldb"),
                     "--data", str(data), "--out", str(tmp_path / "o.ldb")])
        assert code == 2

    def test_n_total_flag_respected(self, workspace, tmp_path):
        out = tmp_path / "nt.ldb"
        assert run_stats(workspace, out, extra=["--n-total", "777"]) == 0
        assert read_bundle(out).meta["n_total"] == 777


@pytest.fixture(scope="module")
def stats_bundle(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("stats") / "stats.ldb"
    assert run_stats(workspace, out) == 0
    return out


class TestInit:
    def test_full_mode_entries_and_meta(self, workspace, stats_bundle, tmp_path):
        out = tmp_path / "init.ldb"
        assert main(["init", "--stats", str(stats_bundle), "--rank", "4",
                     "--mode", "full", "--out", str(out), "--seed", "5"]) == 0
        bundle = read_bundle(out)
        assert bundle.meta["rank"] == 4
        assert bundle.meta["mode"] == 0
        assert bundle.meta["all_converged"] == 1
        a0 = bundle.get_matrix("layer.0.A0")
        np.testing.assert_allclose(a0.T @ a0, np.eye(4), atol=1e-8)
        assert bundle.get_matrix("layer.0.omega_eigvals").shape == (4,)

    def test_grad_svd_matches_svd_oracle(self, workspace, stats_bundle, tmp_path):
        out = tmp_path / "gs.ldb"
        assert main(["init", "--stats", str(stats_bundle), "--rank", "3",
                     "--mode", "grad-svd", "--out", str(out)]) == 0
        init = read_bundle(out)
        stats = read_bundle(stats_bundle)
        for lid in (0, 1):
            g = stats.get_matrix(f"layer.{lid}.G")
            u, _, _ = np.linalg.svd(g, full_matrices=False)
            a0 = init.get_matrix(f"layer.{lid}.A0")
            r = a0.shape[1]
            gap = np.linalg.norm(a0 @ a0.T - u[:, :r] @ u[:, :r].T, "fro")
            assert gap < 1e-8

    def test_rank_zero_usage_error(self, stats_bundle, tmp_path):
        assert main(["init", "--stats", str(stats_bundle), "--rank", "0",
                     "--mode", "full", "--out", str(tmp_path / "x.ldb")]) == 64

    def test_unknown_mode_usage_error(self, stats_bundle, tmp_path):
        assert main(["init", "--stats", str(stats_bundle), "--mode", "nope",
                     "--out", str(tmp_path / "x.ldb")]) == 64

    def test_pissa_requires_checkpoint(self, stats_bundle, tmp_path):
        assert main(["init", "--stats", str(stats_bundle), "--mode", "pissa",
                     "--out", str(tmp_path / "x.ldb")]) == 64

    def test_pissa_with_checkpoint(self, workspace, stats_bundle, tmp_path):
        _, _, ckpt = workspace
        out = tmp_path / "pissa.ldb"
        assert main(["init", "--stats", str(stats_bundle), "--mode", "pissa",
                     "--rank", "2", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        assert read_bundle(out).has("layer.0.Wres")

    def test_missing_entry_exit_3(self, workspace, tmp_path):
        from lora_da.bundle import TensorBundle, write_bundle
        bad = tmp_path / "bad.ldb"
        bundle = TensorBundle(meta={"n_total": 10, "sample_count": 2})
        bundle.add("layer.0.G", np.zeros((4, 3)))
        bundle.add("layer.0.Zfisher", np.eye(4))
        write_bundle(bundle, bad)
        assert main(["init", "--stats", str(bad), "--out", str(tmp_path / "o.ldb")]) == 3

    def test_corrupt_stats_exit_2(self, tmp_path):
        bad = tmp_path / "corrupt.ldb"
        bad.write_bytes(b"NOPE" + b"\x00" * 32)
        assert main(["init", "--stats", str(bad), "--out", str(tmp_path / "o.ldb")]) == 2

    def test_nonconverged_lobpcg_exit_4_bundle_still_written(
        self, workspace, stats_bundle, tmp_path
    ):
        out = tmp_path / "nc.ldb"
        code = main(["init", "--stats", str(stats_bundle), "--rank", "4", "--mode", "full",
                     "--eig-path", "lobpcg", "--lobpcg-max-iter", "1", "--out", str(out)])
        assert code == 4
        assert read_bundle(out).meta["all_converged"] == 0

    def test_byte_reproducible(self, stats_bundle, tmp_path):
        a, b = tmp_path / "a.ldb", tmp_path / "b.ldb"
        for path in (a, b):
            assert main(["init", "--stats", str(stats_bundle), "--rank", "2",
                         "--mode", "full", "--out", str(path), "--seed", "9"]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_requires_exactly_one_source(self, workspace, tmp_path):
        root, data, ckpt = workspace
        base = ["train", "--checkpoint", str(ckpt), "--data", str(data),
                "--metrics-out", str(tmp_path / "m.csv")]
        assert main(base) == 64

    def test_default_mode_run_and_reproducibility(self, workspace, tmp_path):
        root, data, ckpt = workspace
        outs = []
        for name in ("m1.csv", "m2.csv"):
            out = tmp_path / name
            code = main(["train", "--checkpoint", str(ckpt), "--data", str(data),
                         "--mode", "default", "--metrics-out", str(out), "--seed", "5"] + FAST)
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        report = (tmp_path / "m1.csv.report").read_text()
        assert "mode=default" in report
        assert "final_accuracy=" in report

    def test_init_bundle_run(self, workspace, stats_bundle, tmp_path):
        root, data, ckpt = workspace
        init_out = tmp_path / "init.ldb"
        assert main(["init", "--stats", str(stats_bundle), "--rank", "2",
                     "--mode", "full", "--out", str(init_out)]) == 0
        metrics = tmp_path / "m.csv"
        code = main(["train", "--checkpoint", str(ckpt), "--data", str(data),
                     "--init-bundle", str(init_out), "--metrics-out", str(metrics),
                     "--seed", "5"] + FAST)
        assert code == 0
        lines = metrics.read_text().strip().splitlines()
        assert lines[0] == "step,loss,grad_norm,accuracy"
        assert len(lines) > 1

    def test_config_file_overrides_and_unknown_key(self, workspace, tmp_path):
        root, data, ckpt = workspace
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs=1\nn_odd=400\nn_even=200\npretrain_epochs=1\n# comment\n")
        out = tmp_path / "m.csv"
        code = main(["train", "--checkpoint", str(ckpt), "--data", str(data),
                     "--mode", "default", "--config", str(cfg),
                     "--metrics-out", str(out), "--seed", "5"])
        assert code == 0
        bad = tmp_path / "bad.cfg"
        bad.write_text("not_a_key=1\n")
        code = main(["train", "--checkpoint", str(ckpt), "--data", str(data),
                     "--mode", "default", "--config", str(bad),
                     "--metrics-out", str(out), "--seed", "5"])
        assert code == 64


class TestValidate:
    def test_trace_suite_passes_and_reproducible_report(self, tmp_path):
        r1, r2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
        assert main(["validate", "--suite", "trace", "--seed", "3", "--report", str(r1)]) == 0
        assert main(["validate", "--suite", "trace", "--seed", "3", "--report", str(r2)]) == 0
        assert r1.read_bytes() == r2.read_bytes()
        text = r1.read_text()
        assert "trace.gap_non_negative" in text
        assert "tolerance=" in text

    def test_unknown_suite_usage_error(self):
        assert main(["validate", "--suite", "bogus"]) == 64


class TestCompare:
    def test_table_and_timing(self, workspace, tmp_path):
        root, data, ckpt = workspace
        out = tmp_path / "cmp"
        code = main(["compare", "--modes", "default,pissa,milora,grad-svd,full",
                     "--data", str(data), "--out", str(out), "--seed", "5"] + FAST)
        assert code == 0
        table = (out / "comparison.csv").read_text().strip().splitlines()
        assert table[0] == "mode,rank,status,step0_loss,final_loss,final_accuracy"
        assert len(table) == 6  # header + the five baseline modes
        timing = (out / "timing.csv").read_text().splitlines()
        assert timing[0] == "mode,rank,init_seconds,train_seconds,total_seconds"

    def test_empty_modes_usage_error(self, workspace, tmp_path):
        root, data, _ = workspace
        assert main(["compare", "--modes", "", "--data", str(data),
                     "--out", str(tmp_path / "x")]) == 64

    def test_rank_sweep(self, workspace, tmp_path):
        root, data, _ = workspace
        out = tmp_path / "sweep"
        code = main(["compare", "--modes", "default,full", "--ranks", "1,2",
                     "--data", str(data), "--out", str(out), "--seed", "5"] + FAST)
        assert code == 0
        lines = (out / "comparison.csv").read_text().strip().splitlines()
        assert len(lines) == 5


def test_train_rank_sweep_one_csv_per_rank(workspace, tmp_path):
    root, data, ckpt = workspace
    out = tmp_path / "sweep.csv"
    code = main(["train", "--checkpoint", str(ckpt), "--data", str(data),
                 "--mode", "grad-svd", "--ranks", "1,2,4",
                 "--metrics-out", str(out), "--seed", "5"] + FAST)
    assert code == 0
    for rank in (1, 2, 4):
        path = tmp_path / f"sweep.r{rank}.csv"
        assert path.exists()
        assert f"rank={rank}" in (tmp_path / f"sweep.r{rank}.csv.report").read_text()


def test_init_parallel_jobs_byte_identical(workspace, stats_bundle, tmp_path):
    seq, par = tmp_path / "seq.ldb", tmp_path / "par.ldb"
    assert main(["init", "--stats", str(stats_bundle), "--rank", "2", "--mode", "full",
                 "--out", str(seq), "--seed", "7"]) == 0
    assert main(["init", "--stats", str(stats_bundle), "--rank", "2", "--mode", "full",
                 "--jobs", "2", "--out", str(par), "--seed", "7"]) == 0
    assert seq.read_bytes() == par.read_bytes()


def test_env_seed_fallback(workspace, tmp_path, monkeypatch):
    root, data, ckpt = workspace
    monkeypatch.setenv("LORA_DA_SEED", "5")
    a = tmp_path / "env.ldb"
    assert main(["stats", "--model-checkpoint", str(ckpt), "--data", str(data),
                 "--samples", "64", "--out", str(a),
                 "--n-odd", "400", "--n-even", "200"]) == 0
    monkeypatch.delenv("LORA_DA_SEED")
    b = tmp_path / "flag.ldb"
    assert main(["stats", "--model-checkpoint", str(ckpt), "--data", str(data),
                 "--samples", "64", "--out", str(b), "--seed", "5",
                 "--n-odd", "400", "--n-even", "200"]) == 0
    assert a.read_bytes() == b.read_bytes()
