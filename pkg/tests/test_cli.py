import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from groundingdesk.checkpoint import load_checkpoint, read_manifest
from groundingdesk.cli import cmd_eval, cmd_train, main
from groundingdesk.data import GroundingSample, Instance, Phrase, write_unified
from groundingdesk.data.manifest import DatasetManifest
from groundingdesk.metrics import Detection, write_predictions
from groundingdesk.model import GroundingDetector, ModelConfig
from groundingdesk.runconfig import RunConfig
from groundingdesk.text import tokenize

MODEL = {"num_query": 8, "vocab_size": 16}


def digest(root: Path, skip=()) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def same_run(a: Path, b: Path) -> bool:
    """Every output byte-identical; config.json may differ only in the recorded out_dir."""
    def config(root):
        data = json.loads((root / "config.json").read_text())
        data.pop("out_dir")
        return data

    return digest(a, skip=("config.json",)) == digest(b, skip=("config.json",)) and config(a) == config(b)


def write_config(path: Path, **over) -> Path:
    cfg = {"train_manifest": "data/manifest.json", "eval_manifest": "data/manifest.json",
           "model": MODEL, "optimizer": {"steps": 5}, "seed": 3}
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--seed", "1"]) == 0
    write_config(root / "cfg.json")
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(out)]) == 0
    return out


# -- synth / convert --------------------------------------------------------------------------

def test_synth_twice_is_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "7", "--n-images", "3"]) == 0
    a, b = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert a == b and "images/2.npy" in a and "manifest.json" in a


def test_convert_then_eval_truth_is_perfect(tmp_path):
    doc = {"images": [{"id": i, "width": 64, "height": 48} for i in range(3)],
           "categories": [{"id": 4, "name": "mug"}, {"id": 2, "name": "pen"}],
           "annotations": [{"id": 0, "image_id": 0, "category_id": 4, "bbox": [1, 2, 10, 12]},
                           {"id": 1, "image_id": 1, "category_id": 2, "bbox": [20, 5, 30, 30]},
                           {"id": 2, "image_id": 1, "category_id": 4, "bbox": [3, 3, 8, 8], "iscrowd": 1}]}
    (tmp_path / "coco.json").write_text(json.dumps(doc))
    assert main(["convert", str(tmp_path / "coco.json"), "--out", str(tmp_path / "conv")]) == 0
    manifest = DatasetManifest.load(tmp_path / "conv" / "manifest.json")
    assert manifest.categories == ["pen", "mug"]
    truth = [Detection(0, (1.0, 2.0, 11.0, 14.0), 0.9, 1), Detection(1, (20.0, 5.0, 50.0, 35.0), 0.8, 0)]
    write_predictions(tmp_path / "truth.jsonl", truth)
    report = cmd_eval(RunConfig(out_dir=str(tmp_path / "ev")), "ovd",
                      manifest_path=str(tmp_path / "conv" / "manifest.json"),
                      predictions=str(tmp_path / "truth.jsonl"))
    assert report.metrics["mAP"] == 1.0


# -- train / checkpoint -----------------------------------------------------------------------

def test_train_outputs(trained):
    rows = (trained / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,total,cls,l1,giou" and len(rows) == 6
    run = json.loads((trained / "run.json").read_text())
    assert run["command"] == "train" and run["seed"] == 3 and run["version"].startswith("v")
    assert json.loads((trained / "config.json").read_text())["model"]["seed"] == 3


def test_train_is_bit_identical(workspace, trained):
    again = workspace / "run-again"
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(again)]) == 0
    assert same_run(trained, again)


def test_seed_changes_the_run(workspace, trained):
    other = workspace / "run-seed"
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(other), "--seed", "4"]) == 0
    assert (other / "loss.csv").read_bytes() != (trained / "loss.csv").read_bytes()


def test_zero_steps_checkpoint_is_initialization(workspace):
    out = workspace / "run-zero"
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(out), "--steps", "0"]) == 0
    model, _ = load_checkpoint(out / "checkpoint")
    fresh = GroundingDetector(ModelConfig(seed=3, **MODEL))
    state, init = model.state_dict(), fresh.state_dict()
    assert state.keys() == init.keys()
    assert all(np.array_equal(state[k], init[k]) for k in init)


def test_checkpoint_round_trip_preserves_outputs(trained, workspace):
    model, vocab = load_checkpoint(trained / "checkpoint")
    again, _ = load_checkpoint(trained / "checkpoint")
    px = np.load(workspace / "data" / "images" / "0.npy")
    cap = tokenize("shape0. shape1.", vocab)
    a, b = model(px, cap).final, again(px, cap).final
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    assert vocab.tokens == (trained / "vocab.txt").read_text().splitlines()


def test_inspect_reports_parameter_count(trained, capsys):
    assert main(["inspect", str(trained / "checkpoint")]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    model, _ = load_checkpoint(trained / "checkpoint")
    expected = sum(p.data.size for p in model.parameters())
    assert last == f"parameters {expected}" and read_manifest(trained / "checkpoint").n_parameters == expected


# -- eval ---------------------------------------------------------------------------------------

def eval_args(workspace, trained, out, *extra):
    return ["eval", "--config", str(workspace / "cfg.json"), "--checkpoint", str(trained / "checkpoint"),
            "--out", str(out), *extra]


def test_eval_is_bit_identical(workspace, trained):
    a, b = workspace / "ev-a", workspace / "ev-b"
    assert main(eval_args(workspace, trained, a)) == 0
    assert main(eval_args(workspace, trained, b)) == 0
    assert same_run(a, b)
    report = json.loads((a / "report.json").read_text())
    assert set(report["metrics"]) == {"mAP", "AP50", "AP75"}


def test_eval_workers_do_not_change_output(workspace, trained):
    a, b = workspace / "ev-w1", workspace / "ev-w3"
    assert main(eval_args(workspace, trained, a, "--workers", "1")) == 0
    assert main(eval_args(workspace, trained, b, "--workers", "3")) == 0
    assert (a / "predictions.jsonl").read_bytes() == (b / "predictions.jsonl").read_bytes()


def test_eval_d3_modes_run(workspace, trained):
    for mode in ("d3-concat", "d3-parallel"):
        out = workspace / f"ev-{mode}"
        assert main(eval_args(workspace, trained, out, "--mode", mode)) == 0
        assert {"FULL", "PRES", "ABS"} <= set(json.loads((out / "report.json").read_text())["metrics"])


def test_perfect_ovd_predictions(workspace, tmp_path):
    samples = [json.loads(line) for line in (workspace / "data" / "annotations.jsonl").read_text().splitlines()]
    dets = [Detection(s["image_id"], tuple(i["box"]), 1.0, i["category_id"]) for s in samples for i in s["instances"]]
    write_predictions(tmp_path / "p.jsonl", dets)
    report = cmd_eval(RunConfig(out_dir=str(tmp_path / "ev")), "ovd",
                      manifest_path=str(workspace / "data" / "manifest.json"), predictions=str(tmp_path / "p.jsonl"))
    assert report.metrics["mAP"] == 1.0


def grounding_dataset(root: Path, task: str, n_phrases: int = 2) -> Path:
    caption = "a red cup near two pens"
    samples = []
    for k in range(3):
        phrases = [Phrase(0, 2, 9), Phrase(1, 15, 23)][:n_phrases]
        inst = [Instance((2.0 + k, 2.0, 12.0 + k, 10.0), phrase_id=0)]
        if task == "PG":
            inst.append(Instance((14.0, 14.0, 20.0, 30.0), phrase_id=1))
            inst.append(Instance((22.0, 14.0, 28.0, 30.0), phrase_id=1))
        samples.append(GroundingSample(k, 32, 32, task, caption=caption, phrases=phrases, instances=inst))
    root.mkdir(parents=True, exist_ok=True)
    write_unified(root / "a.jsonl", samples)
    DatasetManifest(name=task.lower(), task=task, path="a.jsonl", root=root).save(root / "manifest.json")
    return root / "manifest.json"


def test_perfect_pg_predictions_give_full_recall(tmp_path):
    manifest = grounding_dataset(tmp_path / "pg", "PG")
    dets = []
    for k in range(3):
        dets += [Detection(k, (2.0 + k, 2.0, 12.0 + k, 10.0), 0.9, 0), Detection(k, (14.0, 14.0, 20.0, 30.0), 0.8, 1),
                 Detection(k, (0.0, 20.0, 4.0, 24.0), 0.95, 1)]
    write_predictions(tmp_path / "p.jsonl", dets)
    report = cmd_eval(RunConfig(out_dir=str(tmp_path / "ev")), "pg", manifest_path=str(manifest),
                      predictions=str(tmp_path / "p.jsonl"))
    assert report.metrics["R@1"] == 0.5 and report.metrics["R@5"] == 1.0
    write_predictions(tmp_path / "q.jsonl", [d for d in dets if d.score < 0.95])
    report = cmd_eval(RunConfig(out_dir=str(tmp_path / "ev")), "pg", manifest_path=str(manifest),
                      predictions=str(tmp_path / "q.jsonl"))
    assert report.metrics["R@1"] == 1.0


def test_rec_accuracy_and_sweep(tmp_path, capsys):
    dets = [Detection(k, (2.0 + k, 2.0, 12.0 + k, 10.0), 0.55 + 0.1 * k, 0) for k in range(3)]
    dets += [Detection(0, (1.0, 1.0, 5.0, 5.0), 0.65, 1), Detection(1, (2.0, 20.0, 12.0, 28.0), 0.9, 0)]
    write_predictions(tmp_path / "p.jsonl", dets)
    single = grounding_dataset(tmp_path / "refcoco", "REC", n_phrases=1)
    report = cmd_eval(RunConfig(out_dir=str(tmp_path / "acc")), "rec", manifest_path=str(single),
                      predictions=str(tmp_path / "p.jsonl"))
    assert report.metrics["accuracy"] == 2 / 3
    # the second expression of each image has no target, which accuracy mode rejects
    manifest = grounding_dataset(tmp_path / "rec", "REC")
    assert main(["eval", "--mode", "rec", "--manifest", str(manifest), "--predictions", str(tmp_path / "p.jsonl"),
                 "--out", str(tmp_path / "acc2")]) == 3
    assert main(["sweep", "--manifest", str(manifest), "--predictions", str(tmp_path / "p.jsonl"),
                 "--out", str(tmp_path / "sw")]) == 0
    table = json.loads((tmp_path / "sw" / "report.json").read_text())["partitions"]["gref"]
    assert list(table) == ["0.5", "0.6", "0.7", "0.8"]
    assert [row["N-acc"] for row in table.values()] == [2 / 3, 2 / 3, 1.0, 1.0]
    assert [row["Pr@F1=1"] for row in table.values()] == [2 / 3, 1 / 3, 1 / 3, 0.0]
    assert "0.6667" in capsys.readouterr().out


# -- failures and exit codes -------------------------------------------------------------------

def test_exit_code_config_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert capsys.readouterr().err.startswith("error: ")
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"d_model": 18}}))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["train", "--out", str(tmp_path / "x")]) == 2  # no training manifest


def test_exit_code_mode_mismatch(workspace, trained):
    assert main(eval_args(workspace, trained, workspace / "ev-bad", "--mode", "pg")) == 2


def test_exit_code_data_error(tmp_path):
    write_config(tmp_path / "cfg.json")
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "r")]) == 3
    (tmp_path / "p.jsonl").write_text("{oops\n")
    assert main(["eval", "--manifest", str(grounding_dataset(tmp_path / "d", "REC")), "--mode", "rec",
                 "--predictions", str(tmp_path / "p.jsonl"), "--out", str(tmp_path / "e")]) == 3


def test_exit_code_numeric_error(workspace):
    cfg = write_config(workspace / "cfg-huge.json", optimizer={"lr": 1e300, "steps": 3})
    assert main(["train", "--config", str(cfg), "--out", str(workspace / "run-huge")]) == 4


def test_vocabulary_too_large_for_model(workspace):
    cfg = write_config(workspace / "cfg-small.json", model={"num_query": 8, "vocab_size": 4})
    assert main(["train", "--config", str(cfg), "--out", str(workspace / "run-small")]) == 2


def test_console_entry_point(trained):
    out = subprocess.run([sys.executable, "-m", "groundingdesk.cli", "inspect", str(trained / "checkpoint")],
                         capture_output=True, text=True, check=True).stdout
    assert out.startswith("config ") and out.strip().splitlines()[-1].startswith("parameters ")


def test_cmd_functions_match_cli(workspace, trained, tmp_path):
    cfg = RunConfig.load(workspace / "cfg.json")
    cfg.out_dir = str(tmp_path / "direct")
    out = cmd_train(cfg)
    assert (out / "checkpoint" / "model.bin").read_bytes() == (trained / "checkpoint" / "model.bin").read_bytes()
