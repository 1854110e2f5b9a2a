import csv
import json
import os

import jsonschema
import numpy as np
import pytest

from robust_bnn.cli import main
from robust_bnn.data import load_idx_images, load_idx_labels, write_idx_images, write_idx_labels

from conftest import ROOT

SCHEMAS = os.path.join(ROOT, "docs", "schemas")


def schema(name):
    with open(os.path.join(SCHEMAS, name + ".json")) as fh:
        return json.load(fh)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def tiny_idx(tmp_path_factory):
    """300 MNIST training images, 60 test images, 60 FashionMNIST images."""
    d = tmp_path_factory.mktemp("idx")
    paths = {}
    for name, src, lo, hi in (("train", "mnist/train", 0, 300), ("test", "mnist/t10k", 0, 60),
                              ("ood", "fashion-mnist/", 0, 60)):
        stem = os.path.join(ROOT, "data", src)
        sep = "" if src.endswith("/") else "-"
        imgs = load_idx_images(f"{stem}{sep}images-idx3-ubyte.gz")[lo:hi]
        labs = load_idx_labels(f"{stem}{sep}labels-idx1-ubyte.gz")[lo:hi]
        paths[name] = (str(d / f"{name}-images.gz"), str(d / f"{name}-labels.gz"))
        write_idx_images(paths[name][0], np.round(imgs * 255).astype(np.uint8))
        write_idx_labels(paths[name][1], labs)
    cfg = d / "tiny.ini"
    cfg.write_text(f"""[run]
seed = 1
[data]
train_images = {paths['train'][0]}
train_labels = {paths['train'][1]}
test_images = {paths['test'][0]}
test_labels = {paths['test'][1]}
ood_images = {paths['ood'][0]}
ood_labels = {paths['ood'][1]}
train_size = 0
test_size = 0
[model]
hidden = 16
[train]
likelihood = ibp
epochs = 2
batch_size = 50
[certify]
samples = 5
radius_points = 10
radius_tol = 0.01
[attack]
eval_steps = 5
""")
    return cfg, paths


@pytest.fixture(scope="module")
def trained(tiny_idx, tmp_path_factory):
    cfg, _ = tiny_idx
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return cfg, out


def test_train_outputs(trained):
    cfg, out = trained
    summary = read_json(out / "train.json")
    jsonschema.validate(summary, schema("train"))
    assert summary["epochs"] == 2 and summary["seed"] == 1
    with open(out / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    with open(out / "train_steps.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2 * 6


def test_evaluation_verbs(trained, tmp_path, capsys):
    cfg, out = trained
    post = out / "posterior.bin"
    common = ["--config", cfg, "--posterior", post, "--out-dir", tmp_path]
    code, stdout, _ = run(["certify", *common, "--eps", 0.05, "--radius"], capsys)
    assert code == 0
    cert = json.loads(stdout)
    jsonschema.validate(cert, schema("certify"))
    assert cert["ibp_certified_accuracy"] <= cert["pgd_robust_accuracy"] <= cert["accuracy"]
    assert cert == read_json(tmp_path / "certify.json") and cert["N"] == 5
    with open(tmp_path / "certify_points.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 60
    assert np.mean([int(r["certified"]) for r in rows]) == cert["ibp_certified_accuracy"]
    assert all(float(r["radius"]) > 0 for r in rows if r["certified"] == "1")

    code, stdout, _ = run(["certify", *common, "--eps", 0], capsys)
    zero = json.loads(stdout)
    assert zero["ibp_certified_accuracy"] == zero["accuracy"] == cert["accuracy"]

    code, stdout, _ = run(["attack", *common, "--eps", 0.05], capsys)
    att = json.loads(stdout)
    jsonschema.validate(att, schema("attack"))
    assert att["pgd_robust_accuracy"] == cert["pgd_robust_accuracy"]

    code, stdout, _ = run(["radius", *common], capsys)
    rad = json.loads(stdout)
    jsonschema.validate(rad, schema("radius"))
    assert rad["points"] == 10 and rad["mean_radius"] >= 0

    code, stdout, _ = run(["uncertainty", *common, "--bins", 5], capsys)
    unc = json.loads(stdout)
    jsonschema.validate(unc, schema("uncertainty"))
    assert unc["in_size"] == unc["out_size"] == 60
    with open(tmp_path / "entropy_hist_out.csv") as fh:
        assert sum(int(r["count"]) for r in csv.DictReader(fh)) == 60


def test_reruns_are_byte_identical(tiny_idx, tmp_path):
    cfg, _ = tiny_idx
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["train", "--config", str(cfg), "--out-dir", str(d)]) == 0
        assert main(["certify", "--config", str(cfg), "--posterior", str(d / "posterior.bin"),
                     "--out-dir", str(d)]) == 0
    for name in ("posterior.bin", "train_log.csv", "certify.json", "certify_samples.bin",
                 "certify_points.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_the_posterior(tiny_idx, tmp_path):
    cfg, _ = tiny_idx
    assert main(["train", "--config", str(cfg), "--seed", "5", "--out-dir", str(tmp_path)]) == 0
    assert read_json(tmp_path / "train.json")["seed"] == 5


@pytest.mark.parametrize("argv, code", [
    (["train", "--config", "/nonexistent.ini"], 2),
    (["certify", "--posterior", "/nonexistent.bin"], 1),
    (["certify"], 2),
    (["frobnicate"], 2),
    (["train", "--threads", "0"], 2),
])
def test_errors_print_one_json_line(argv, code, tmp_path, capsys):
    got, stdout, stderr = run(argv + ["--out-dir", tmp_path], capsys)
    assert got == code and stdout == ""
    lines = stderr.strip().splitlines()
    assert len(lines) == 1
    jsonschema.validate(json.loads(lines[0]), schema("error"))


def test_config_error_names_the_field(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmethod = sgd\n")
    code, _, stderr = run(["train", "--config", bad, "--out-dir", tmp_path], capsys)
    assert code == 2 and json.loads(stderr)["field"] == "train.method"


def test_bad_posterior_file(tmp_path, capsys):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"definitely not a posterior")
    code, _, stderr = run(["radius", "--posterior", p, "--out-dir", tmp_path], capsys)
    assert code == 1 and json.loads(stderr)["error"] == "FormatError"


def test_toy_bbb_loss_decreases(tmp_path):
    assert main(["train", "--config", os.path.join(ROOT, "configs", "toy_bbb.ini"),
                 "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "train_steps.csv") as fh:
        losses = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
    smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert smooth[-1] < smooth[0]
    assert read_json(tmp_path / "train.json")["final_accuracy"] > 0.9


@pytest.mark.parametrize("method, likelihood", [("hmc", "standard"), ("hmc", "ibp"),
                                                ("swag", "standard"), ("swag", "ibp")])
def test_sampling_methods_train_and_certify(method, likelihood, tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"""[data]
kind = toy
toy_size = 100
[model]
hidden = 8
[train]
method = {method}
likelihood = {likelihood}
epochs = 6
batch_size = 20
lr = 0.05
[hmc]
step_size = 0.01
leapfrog_steps = 5
burn_in = 2
num_samples = 5
thin = 3
warm_start_epochs = 2
[swag]
warmup_epochs = 2
collect_every = 2
[certify]
samples = 10
""")
    assert run(["train", "--config", cfg, "--out-dir", tmp_path], capsys)[0] == 0
    summary = read_json(tmp_path / "train.json")
    assert summary["method"] == method and summary["final_accuracy"] > 0.5
    code, stdout, _ = run(["certify", "--config", cfg, "--posterior", tmp_path / "posterior.bin",
                           "--out-dir", tmp_path], capsys)
    assert code == 0
    cert = json.loads(stdout)
    assert cert["ibp_certified_accuracy"] <= cert["pgd_robust_accuracy"] <= cert["accuracy"]
    assert cert["N"] == 10
