import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from mmdyn.cli import apply_overrides, main
from mmdyn.data import load_dataset

SYNTH = {
    "sample_count": 240, "class_count": 3, "seed": 1,
    "modalities": [
        {"name": "protein", "kind": "tabular", "n_features": 12, "n_informative": 3},
        {"name": "rna", "kind": "tabular", "n_features": 15, "n_informative": 3},
        {"name": "image", "kind": "image", "height": 12, "width": 12, "patch": [4, 4, 4, 4]},
    ],
}
TRAIN = {"epochs": 4, "batch_size": 32, "latent_dims": {"protein": 4, "rna": 4, "image": 8}, "image_hidden_dim": 16,
         "loss_weights": {"lambda1": 0.01}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SYNTH))
    (root / "train.json").write_text(json.dumps(TRAIN))
    assert main(["synth", "--config", str(root / "synth.json"), "-o", str(root / "syn")]) == 0
    assert main(["train", "--config", str(root / "train.json"), "--data", str(root / "syn" / "dataset"),
                 "-o", str(root / "run")]) == 0
    return root


def test_synth_outputs(workspace):
    syn = workspace / "syn"
    truth = json.loads((syn / "ground_truth.json").read_text())
    assert set(truth) == {"planted_features", "planted_patch", "informative_modalities"}
    assert len(truth["informative_modalities"]) == 240
    assert (syn / "dataset" / "protein.csv").is_file()
    assert json.loads((syn / "run.json").read_text())["verb"] == "synth"


def test_train_outputs(workspace, capsys):
    run = workspace / "run"
    for f in ("checkpoint.ckpt", "split.json", "history.json", "metrics.json", "metrics.tsv", "confidence.jsonl",
              "tcp_curve_protein.tsv", "run.json"):
        assert (run / f).is_file(), f
    assert len(json.loads((run / "history.json").read_text())) == 4
    metrics = json.loads((run / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"f1_weighted", "f1_macro", "recall_weighted", "precision_weighted",
                                       "accuracy", "balanced_accuracy"}
    # the default test patient is the last one
    split = json.loads((run / "split.json").read_text())
    patients = load_dataset(workspace / "syn" / "dataset").patient_ids
    assert set(patients[split["test_indices"]]) == {"P2"}


def test_eval_reproduces_metrics(workspace):
    out = workspace / "ev"
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.ckpt"),
                 "--data", str(workspace / "syn" / "dataset"), "-o", str(out)]) == 0
    a = json.loads((out / "metrics.json").read_text())["metrics"]
    b = json.loads((workspace / "run" / "metrics.json").read_text())["metrics"]
    assert a == b


def test_explain(workspace):
    out = workspace / "ex"
    assert main(["explain", "--checkpoint", str(workspace / "run" / "checkpoint.ckpt"),
                 "--data", str(workspace / "syn" / "dataset"), "-o", str(out)]) == 0
    for m in ("protein", "rna"):
        lines = (out / f"biomarkers_{m}.tsv").read_text().splitlines()
        assert lines[0] == "rank\tfeature_name\tmean_gate" and len(lines) == 11
    mean = np.asarray(Image.open(out / "heatmap_image_mean.png"))
    assert mean.shape == (12, 12) and mean.dtype == np.uint8
    assert len(list((out / "heatmaps_image").glob("*.png"))) > 0


def test_mask_eval(workspace):
    out = workspace / "me"
    assert main(["mask-eval", "--checkpoint", str(workspace / "run" / "checkpoint.ckpt"), "--mask-modality", "image",
                 "--data", str(workspace / "syn" / "dataset"), "-o", str(out)]) == 0
    rows = json.loads((out / "masking.json").read_text())["rows"]
    assert set(rows) == {"unmasked", "masked image"}


def test_ablate(workspace, capsys):
    out = workspace / "ab"
    code = main(["ablate", "--config", str(workspace / "train.json"), "--data", str(workspace / "syn" / "dataset"),
                 "--variants", "none,FI,MI,both", "--seeds", "1,2", "-o", str(out), "epochs=2"])
    assert code == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 5 and all(len(r.split("\t")) == 7 for r in table)
    assert len(list((out / "runs").iterdir())) == 8


def test_sweep(workspace):
    out = workspace / "sw"
    code = main(["sweep", "--config", str(workspace / "train.json"), "--data", str(workspace / "syn" / "dataset"),
                 "--axis", "lambdas", "--values", "1,1,1;10,1,1;1,10,1;1,1,10", "--seeds", "0", "-o", str(out),
                 "epochs=1"])
    assert code == 0
    assert len((out / "sweep.tsv").read_text().splitlines()) == 5


@pytest.mark.parametrize("argv,code,category", [
    ([], 2, "usage"),
    (["frobnicate", "-o", "x"], 2, "usage"),
    (["train", "-o", "{out}"], 2, "usage"),
    (["train", "--data", "{data}", "-o", "{out}", "epochs=0"], 3, "config"),
    (["train", "--data", "{data}", "-o", "{out}", "bogus_key=1"], 3, "config"),
    (["train", "--data", "{out}/missing", "-o", "{out}"], 1, "runtime"),
    (["sweep", "--data", "{data}", "-o", "{out}"], 3, "config"),
])
def test_errors(workspace, tmp_path, capsys, argv, code, category):
    argv = [a.format(out=tmp_path, data=workspace / "syn" / "dataset") for a in argv]
    assert main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith(f"error[{category}]:")


def test_overrides():
    cfg = apply_overrides({"a": {"b": 1}}, ["a.c=2", "d=[1, 2]", "e=text", "a.b=0.5"])
    assert cfg == {"a": {"b": 0.5, "c": 2}, "d": [1, 2], "e": "text"}


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mmdyn.cli", "nope", "-o", str(tmp_path)], capture_output=True,
                          text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("error[usage]:")
