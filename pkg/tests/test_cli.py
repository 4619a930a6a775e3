"""End-to-end tests of the command-line interface.

Subcommands run in-process through ``main`` so exit codes and stdout are
directly observable; a couple of tests shell out to the installed console
script to confirm the packaging entry point. A module-scoped workspace runs
synth -> train -> partition once and the read-only tests share it.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from second_opinions import (
    PanelDataset,
    Partition,
    Sample,
    load_dataset,
    load_models,
    save_dataset,
)
from second_opinions.cli import main

SYNTH_FLAGS = [
    "--seed", "7",
    "--n-experts", "6",
    "--group-sizes", "3,3",
    "--k", "3",
    "--d", "2",
    "--n-train", "150",
    "--n-test", "25",
    "--sparsity", "0.3",
]

PARTITION_FLAGS = ["--seed", "7", "--t-weights", "200", "--restarts", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth -> train -> partition pipeline shared by read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    models = root / "models"
    part = root / "partition"
    assert main(["synth", "--out-dir", str(data), *SYNTH_FLAGS]) == 0
    assert main(["train", "--train", str(data / "train.jsonl"), "--out-dir", str(models)]) == 0
    assert main([
        "partition",
        "--train", str(data / "train.jsonl"),
        "--models", str(models),
        "--out-dir", str(part),
        *PARTITION_FLAGS,
    ]) == 0
    truth = Partition.from_jsonable(
        json.loads((data / "truth_partition.json").read_text(encoding="utf-8"))
    )
    return {"root": root, "data": data, "models": models, "partition": part, "truth": truth}


def infer_args(ws, **overrides):
    truth = ws["truth"]
    observed = sorted(truth.experts)[0]
    args = {
        "models": str(ws["models"]),
        "partition": str(ws["data"] / "truth_partition.json"),
        "observed-expert": observed,
        "observed-label": "1",
        "features": "0.2,0.8",
    }
    args.update(overrides)
    argv = ["infer"]
    for key, value in args.items():
        if value is not None:
            argv += [f"--{key}", value]
    return argv


# --- synth ---------------------------------------------------------------


class TestSynth:
    def test_emits_all_artifacts(self, workspace):
        data = workspace["data"]
        for name in ("train.jsonl", "train.meta.json", "test.jsonl", "test.meta.json",
                     "truth_partition.json"):
            assert (data / name).is_file(), name
        assert (data / "truth_models").is_dir()

    def test_datasets_load_and_match_flags(self, workspace):
        train = load_dataset(workspace["data"] / "train.jsonl")
        test = load_dataset(workspace["data"] / "test.jsonl")
        assert train.k == 3 and train.d == 2
        assert len(train.experts) == 6
        assert train.n == 150 and test.n == 25
        # test split is dense, train split is sparse
        assert all(len(s.predictions) == 6 for s in test.samples)
        assert any(len(s.predictions) < 6 for s in train.samples)

    def test_truth_partition_matches_group_sizes(self, workspace):
        sizes = sorted(len(g) for g in workspace["truth"].groups)
        assert sizes == [3, 3]

    def test_truth_models_cover_roster(self, workspace):
        models = load_models(workspace["data"] / "truth_models")
        train = load_dataset(workspace["data"] / "train.jsonl")
        assert sorted(models) == sorted(train.experts)

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--out-dir", str(again), *SYNTH_FLAGS]) == 0
        for name in ("train.jsonl", "test.jsonl", "truth_partition.json"):
            assert (again / name).read_bytes() == (workspace["data"] / name).read_bytes()

    def test_different_seed_changes_data(self, workspace, tmp_path):
        other = tmp_path / "other"
        flags = list(SYNTH_FLAGS)
        flags[flags.index("7")] = "8"
        assert main(["synth", "--out-dir", str(other), *flags]) == 0
        assert (other / "train.jsonl").read_bytes() != (workspace["data"] / "train.jsonl").read_bytes()

    def test_missing_out_dir_is_usage_error(self):
        assert main(["synth", *SYNTH_FLAGS]) == 2

    def test_bad_group_sizes_is_usage_error(self, tmp_path):
        assert main(["synth", "--out-dir", str(tmp_path / "x"),
                     "--n-experts", "6", "--group-sizes", "3,nope"]) == 2

    def test_group_sizes_sum_mismatch_is_usage_error(self, tmp_path):
        assert main(["synth", "--out-dir", str(tmp_path / "x"),
                     "--n-experts", "6", "--group-sizes", "3,4"]) == 2


# --- train ---------------------------------------------------------------


class TestTrain:
    def test_one_model_file_per_expert(self, workspace):
        models = load_models(workspace["models"])
        assert sorted(models) == sorted(workspace["truth"].experts)
        assert all(m.k == 3 for m in models.values())

    def test_missing_train_flag_is_usage_error(self, tmp_path):
        assert main(["train", "--out-dir", str(tmp_path / "m")]) == 2

    def test_nonexistent_train_file_is_usage_error(self, tmp_path):
        assert main(["train", "--train", str(tmp_path / "nope.jsonl"),
                     "--out-dir", str(tmp_path / "m")]) == 2

    def test_expert_missing_a_class_is_runtime_error(self, tmp_path):
        # 'a' never says 1, so its class-conditional fit cannot proceed
        rng = np.random.default_rng(0)
        samples = tuple(
            Sample(sample_id=f"s{i}", features=rng.uniform(size=2),
                   predictions={"a": 0, "b": i % 2})
            for i in range(10)
        )
        ds = PanelDataset(k=2, d=2, samples=samples, experts=("a", "b"))
        path = tmp_path / "degenerate.jsonl"
        save_dataset(ds, path)
        assert main(["train", "--train", str(path), "--out-dir", str(tmp_path / "m")]) == 1


# --- partition -----------------------------------------------------------


class TestPartition:
    def test_emits_all_artifacts(self, workspace):
        part = workspace["partition"]
        for name in ("violations.csv", "partition.json", "graph_stats.json"):
            assert (part / name).is_file(), name

    def test_partition_covers_roster(self, workspace):
        learned = Partition.from_jsonable(
            json.loads((workspace["partition"] / "partition.json").read_text(encoding="utf-8"))
        )
        assert sorted(learned.experts) == sorted(workspace["truth"].experts)

    def test_graph_stats_schema(self, workspace):
        stats = json.loads((workspace["partition"] / "graph_stats.json").read_text(encoding="utf-8"))
        expected = {"n_vertices", "n_permissible_edges", "n_violations", "n_groups",
                    "n_singletons", "objective", "all_singletons"}
        assert set(stats) == expected
        assert stats["n_vertices"] == 6
        assert 1 <= stats["n_groups"] <= 6
        assert isinstance(stats["all_singletons"], bool)

    def test_violations_csv_header(self, workspace):
        first = (workspace["partition"] / "violations.csv").read_text(encoding="utf-8").splitlines()[0]
        assert first == "sample_id,source,target,source_label,target_label,ratio_lhs,ratio_rhs"

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert main([
            "partition",
            "--train", str(workspace["data"] / "train.jsonl"),
            "--models", str(workspace["models"]),
            "--out-dir", str(again),
            *PARTITION_FLAGS,
        ]) == 0
        for name in ("violations.csv", "partition.json", "graph_stats.json"):
            assert (again / name).read_bytes() == (workspace["partition"] / name).read_bytes()

    def test_missing_models_flag_is_usage_error(self, workspace, tmp_path):
        assert main(["partition", "--train", str(workspace["data"] / "train.jsonl"),
                     "--out-dir", str(tmp_path / "p")]) == 2

    def test_model_roster_mismatch_is_usage_error(self, workspace, tmp_path):
        # models trained for a different roster cannot cover this panel
        rng = np.random.default_rng(1)
        samples = tuple(
            Sample(sample_id=f"s{i}", features=rng.uniform(size=2),
                   predictions={"zz": i % 3})
            for i in range(12)
        )
        ds = PanelDataset(k=3, d=2, samples=samples, experts=("zz",))
        path = tmp_path / "other.jsonl"
        save_dataset(ds, path)
        assert main(["partition", "--train", str(path),
                     "--models", str(workspace["models"]),
                     "--out-dir", str(tmp_path / "p")]) == 2


# --- infer ---------------------------------------------------------------


class TestInfer:
    def read_doc(self, capsys, argv):
        code = main(argv)
        out = capsys.readouterr().out
        assert code == 0, out
        return json.loads(out)

    def test_single_target_same_group(self, workspace, capsys):
        truth = workspace["truth"]
        observed = sorted(truth.experts)[0]
        mate = sorted(truth.group_members(observed))
        target = [h for h in mate if h != observed][0]
        doc = self.read_doc(capsys, infer_args(workspace, target=target, **{"observed-label": "1"}))
        assert doc["observed_expert"] == observed
        assert doc["observed_label"] == 1
        assert doc["features"] == "inline"
        (result,) = doc["results"]
        assert result["target"] == target
        assert result["exact"] is False
        assert result["num_samples"] == 1000  # default -T
        probs = np.asarray(result["probs"])
        assert probs.shape == (3,)
        assert probs.min() >= 0 and np.isclose(probs.sum(), 1.0)
        assert result["argmax"] == int(np.argmax(probs))

    def test_single_target_cross_group_is_exact(self, workspace, capsys):
        truth = workspace["truth"]
        observed = sorted(truth.experts)[0]
        target = sorted(h for h in truth.experts if not truth.same_group(observed, h))[0]
        doc = self.read_doc(capsys, infer_args(workspace, target=target))
        (result,) = doc["results"]
        assert result["exact"] is True
        assert result["num_samples"] == 0

    def test_all_targets_cover_roster(self, workspace, capsys):
        doc = self.read_doc(capsys, infer_args(workspace, target="all"))
        targets = [r["target"] for r in doc["results"]]
        observed = doc["observed_expert"]
        assert targets == sorted(h for h in workspace["truth"].experts if h != observed)

    def test_features_from_dataset_sample(self, workspace, capsys):
        test = load_dataset(workspace["data"] / "test.jsonl")
        sid = test.samples[0].sample_id
        doc = self.read_doc(capsys, infer_args(
            workspace, features=None, dataset=str(workspace["data"] / "test.jsonl"),
            **{"sample-id": sid, "target": "all"},
        ))
        assert doc["features"] == sid

    def test_rerun_stdout_is_identical(self, workspace, capsys):
        argv = infer_args(workspace, target="all")
        first = self.read_doc(capsys, argv)
        second = self.read_doc(capsys, argv)
        assert first == second

    def test_unknown_observed_expert_is_usage_error(self, workspace):
        assert main(infer_args(workspace, **{"observed-expert": "ghost"})) == 2

    def test_unknown_target_is_usage_error(self, workspace):
        assert main(infer_args(workspace, target="ghost")) == 2

    def test_target_equal_to_observed_is_usage_error(self, workspace):
        observed = sorted(workspace["truth"].experts)[0]
        assert main(infer_args(workspace, target=observed)) == 2

    def test_label_out_of_range_is_usage_error(self, workspace):
        assert main(infer_args(workspace, **{"observed-label": "3"})) == 2

    def test_malformed_features_is_usage_error(self, workspace):
        assert main(infer_args(workspace, features="0.2,zebra")) == 2

    def test_missing_features_and_dataset_is_usage_error(self, workspace):
        assert main(infer_args(workspace, features=None)) == 2

    def test_unknown_sample_id_is_usage_error(self, workspace):
        assert main(infer_args(
            workspace, features=None, dataset=str(workspace["data"] / "test.jsonl"),
            **{"sample-id": "nope"},
        )) == 2


# --- eval ----------------------------------------------------------------


class TestEval:
    def run_eval(self, workspace, out_dir, predictor, capsys, extra=()):
        argv = [
            "eval",
            "--test", str(workspace["data"] / "test.jsonl"),
            "--train", str(workspace["data"] / "train.jsonl"),
            "--models", str(workspace["models"]),
            "--partition", str(workspace["data"] / "truth_partition.json"),
            "--predictor", predictor,
            "--out-dir", str(out_dir),
            "--seed", "7", "-T", "200",
            *extra,
        ]
        code = main(argv)
        out = capsys.readouterr().out
        assert code == 0, out
        return json.loads(out)

    @pytest.mark.parametrize("predictor", ["siscm", "gnb", "gnb_cnb"])
    def test_emits_report_files_and_summary(self, workspace, tmp_path, capsys, predictor):
        out = tmp_path / predictor
        doc = self.run_eval(workspace, out, predictor, capsys)
        assert doc["predictor"] == predictor
        assert 0.0 <= doc["overall_accuracy"] <= 1.0
        assert doc["n_predictions"] > 0
        assert set(doc["scenario_accuracies"]) == {"all_pairs", "same_group", "cross_group"}
        for name in ("report.json", "per_expert_accuracy.csv", "confusion_matrix.csv"):
            assert (out / name).is_file(), name
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["overall_accuracy"] == doc["overall_accuracy"]

    def test_rerun_is_byte_identical(self, workspace, tmp_path, capsys):
        first = self.run_eval(workspace, tmp_path / "a", "siscm", capsys)
        second = self.run_eval(workspace, tmp_path / "b", "siscm", capsys)
        assert first == second
        for name in ("report.json", "per_expert_accuracy.csv", "confusion_matrix.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_shared_noise_beats_marginal_here(self, workspace, tmp_path, capsys):
        # planted groups with the true partition: counterfactuals must help
        cf = self.run_eval(workspace, tmp_path / "cf", "siscm", capsys)
        marginal = self.run_eval(workspace, tmp_path / "mg", "gnb", capsys)
        assert cf["scenario_accuracies"]["same_group"] > marginal["scenario_accuracies"]["same_group"]

    def test_missing_partition_is_usage_error(self, workspace, tmp_path):
        assert main([
            "eval",
            "--test", str(workspace["data"] / "test.jsonl"),
            "--models", str(workspace["models"]),
            "--predictor", "gnb",
            "--out-dir", str(tmp_path / "x"),
        ]) == 2

    def test_partition_missing_expert_is_usage_error(self, workspace, tmp_path):
        roster = sorted(workspace["truth"].experts)
        partial = Partition.from_groups([roster[:-1]])
        path = tmp_path / "partial.json"
        path.write_text(json.dumps(partial.to_jsonable()), encoding="utf-8")
        assert main([
            "eval",
            "--test", str(workspace["data"] / "test.jsonl"),
            "--models", str(workspace["models"]),
            "--partition", str(path),
            "--predictor", "gnb",
            "--out-dir", str(tmp_path / "x"),
        ]) == 2

    def test_gnb_cnb_without_train_is_usage_error(self, workspace, tmp_path):
        assert main([
            "eval",
            "--test", str(workspace["data"] / "test.jsonl"),
            "--models", str(workspace["models"]),
            "--partition", str(workspace["data"] / "truth_partition.json"),
            "--predictor", "gnb_cnb",
            "--out-dir", str(tmp_path / "x"),
        ]) == 2


# --- bench ---------------------------------------------------------------

BENCH_FLAGS = [
    "--m-grid", "100,120",
    "--s-grid", "0.5",
    "--replicates", "2",
    "--n-experts", "4",
    "--group-sizes", "2,2",
    "--k", "2",
    "--d", "2",
    "--n-test", "30",
    "-T", "40",
    "--t-weights", "60",
    "--restarts", "3",
    "--seed", "11",
]


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(["bench", "--out-dir", str(out), *BENCH_FLAGS]) == 0
    return out


class TestBench:
    def test_row_count_is_grid_times_replicates(self, grid):
        lines = (grid / "grid.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "m,s,replicate,ari,edge_ratio,loss_recovered,loss_truth,loss_independent"
        assert len(lines) == 1 + 2 * 1 * 2

    def test_rows_are_well_formed(self, grid):
        lines = (grid / "grid.csv").read_text(encoding="utf-8").splitlines()[1:]
        seen = set()
        for line in lines:
            m, s, r, ari, ratio, l_rec, l_tru, l_ind = line.split(",")
            seen.add((int(m), float(s), int(r)))
            assert -1.0 <= float(ari) <= 1.0
            assert 0.0 <= float(ratio) <= 1.0
            for loss in (l_rec, l_tru, l_ind):
                assert 0.0 <= float(loss) <= 1.0
        assert seen == {(m, 0.5, r) for m in (100, 120) for r in (0, 1)}

    def test_rerun_is_byte_identical(self, grid, tmp_path):
        again = tmp_path / "again"
        assert main(["bench", "--out-dir", str(again), *BENCH_FLAGS]) == 0
        assert (again / "grid.csv").read_bytes() == (grid / "grid.csv").read_bytes()

    def test_missing_grid_flags_is_usage_error(self, tmp_path):
        assert main(["bench", "--out-dir", str(tmp_path / "x")]) == 2

    def test_sparsity_out_of_range_is_usage_error(self, tmp_path):
        assert main(["bench", "--out-dir", str(tmp_path / "x"),
                     "--m-grid", "100", "--s-grid", "1.0"]) == 2

    def test_zero_training_size_is_usage_error(self, tmp_path):
        assert main(["bench", "--out-dir", str(tmp_path / "x"),
                     "--m-grid", "0", "--s-grid", "0.5"]) == 2


# --- config file and shared flags ----------------------------------------


class TestConfigResolution:
    def test_config_file_sets_sample_count(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"T": 37}), encoding="utf-8")
        truth = workspace["truth"]
        observed = sorted(truth.experts)[0]
        target = sorted(h for h in truth.group_members(observed) if h != observed)[0]
        code = main(infer_args(workspace, target=target, config=str(cfg)))
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert doc["results"][0]["num_samples"] == 37

    def test_flag_overrides_config_file(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"T": 37}), encoding="utf-8")
        truth = workspace["truth"]
        observed = sorted(truth.experts)[0]
        target = sorted(h for h in truth.group_members(observed) if h != observed)[0]
        argv = infer_args(workspace, target=target, config=str(cfg)) + ["-T", "11"]
        code = main(argv)
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert doc["results"][0]["num_samples"] == 11

    def test_config_seed_equals_flag_seed(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 3}), encoding="utf-8")
        argv_cfg = infer_args(workspace, target="all", config=str(cfg))
        argv_flag = infer_args(workspace, target="all") + ["--seed", "3"]
        assert main(argv_cfg) == 0
        out_cfg = capsys.readouterr().out
        assert main(argv_flag) == 0
        out_flag = capsys.readouterr().out
        assert out_cfg == out_flag

    def test_invalid_json_config_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json", encoding="utf-8")
        assert main(infer_args(workspace, config=str(cfg))) == 2

    def test_non_object_config_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]", encoding="utf-8")
        assert main(infer_args(workspace, config=str(cfg))) == 2

    def test_non_integer_seed_in_config_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": "abc"}), encoding="utf-8")
        assert main(infer_args(workspace, config=str(cfg))) == 2

    @pytest.mark.parametrize("flag,value", [("-T", "0"), ("--t-weights", "0"),
                                            ("--restarts", "0"), ("--threads", "0")])
    def test_non_positive_counts_are_usage_errors(self, workspace, flag, value):
        assert main(infer_args(workspace) + [flag, value]) == 2


# --- console entry point --------------------------------------------------


class TestEntryPoint:
    def test_console_script_help(self):
        exe = shutil.which("second-opinions")
        assert exe is not None, "console script not installed"
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "bench" in proc.stdout

    def test_module_invocation_without_subcommand_fails(self):
        proc = subprocess.run(
            [sys.executable, "-m", "second_opinions.cli"], capture_output=True, text=True
        )
        assert proc.returncode == 2

    def test_bad_predictor_choice_fails_at_parse(self):
        proc = subprocess.run(
            [sys.executable, "-m", "second_opinions.cli", "eval", "--predictor", "oracle"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
