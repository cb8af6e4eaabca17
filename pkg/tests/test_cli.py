import filecmp
import re
import subprocess
import sys

import numpy as np
import pytest

from irisxxs.cli import main
from irisxxs.codec import IrisTemplate, load_template, save_template
from irisxxs.data import load_manifest
from irisxxs.imaging import save_image
from irisxxs.metrics import enumerate_comparisons
from irisxxs.synth import natural_background


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "irisxxs", "model-info"], capture_output=True, text=True)
    assert r.returncode == 0 and "29,321" in r.stdout


def test_synth_counts_and_determinism(tmp_path, capsys):
    assert run(capsys, "synth", "--identities", 20, "--samples", 5, "--iris-radius", 25, "--out", tmp_path / "a",
               "--seed", 3)[0] == 0
    m = load_manifest(tmp_path / "a" / "manifest.csv")
    comps = enumerate_comparisons(list(m))
    assert len(m) == 100 and sum(c[2] for c in comps) == 200
    run(capsys, "synth", "--identities", 20, "--samples", 5, "--iris-radius", 25, "--out", tmp_path / "b", "--seed", 3)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in cmp.common_files)
    assert (tmp_path / "a" / "manifest.csv").read_text().startswith("# seed=3")


def test_synth_single_scene(tmp_path, capsys):
    assert run(capsys, "synth", "--identities", 1, "--samples", 1, "--out", tmp_path, "--seed", 0)[0] == 0
    m = load_manifest(tmp_path / "manifest.csv")
    assert len(m) == 1 and not any(c[2] for c in enumerate_comparisons(list(m)))


def test_synth_unwritable_dir_is_exit_2(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "synth", "--identities", 1, "--samples", 1, "--out", blocker / "sub", "--seed", 0)
    assert code == 2 and "cannot write" in err


def test_bad_arguments_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--identities", "1"])
    assert e.value.code == 2
    assert run(capsys, "synth", "--identities", 0, "--samples", 1, "--out", "x", "--seed", 0)[0] == 2


def test_match_self_and_complement(tmp_path, capsys):
    rng = np.random.default_rng(0)
    t = IrisTemplate(rng.random((7, 64, 512)) < 0.5, np.ones((64, 512), bool), "S1", "left")
    save_template(t, tmp_path / "a.irt")
    save_template(IrisTemplate(~t.code, t.mask), tmp_path / "b.irt")
    code, out, _ = run(capsys, "match", "--template", tmp_path / "a.irt", "--template", tmp_path / "a.irt",
                       "--threshold", 1e-6)
    assert code == 0 and "hd: 0.000000" in out and "decision: MATCH" in out
    code, out, _ = run(capsys, "match", "--template", tmp_path / "a.irt", "--template", tmp_path / "b.irt")
    assert "hd: 1.000000" in out and "decision: NON-MATCH" in out
    save_template(IrisTemplate(t.code, np.zeros((64, 512), bool)), tmp_path / "e.irt")
    assert run(capsys, "match", "--template", tmp_path / "a.irt", "--template", tmp_path / "e.irt")[0] == 7
    (tmp_path / "bad.irt").write_bytes(b"nope")
    assert run(capsys, "match", "--template", tmp_path / "a.irt", "--template", tmp_path / "bad.irt")[0] == 2
    assert run(capsys, "match", "--template", tmp_path / "a.irt")[0] == 2


def test_calibrate_interval_reference(capsys):
    code, out, _ = run(capsys, "calibrate", "interval")
    assert code == 0 and out.splitlines()[-1] == "optimal: [25, 35] cm"
    code, out, _ = run(capsys, "calibrate", "interval", "--interval", ":35", "--interval", ":40",
                       "--interval", "25:")
    assert "[25, 35] cm" in out
    code, out, _ = run(capsys, "calibrate", "interval", "--interval", "0:10", "--interval", "20:30")
    assert code == 0 and "infeasible" in out
    assert run(capsys, "calibrate", "interval", "--interval", "5")[0] == 2


def test_calibrate_distance(tmp_path, capsys):
    code, out, _ = run(capsys, "calibrate", "distance", "--point", "30:45", "--out", tmp_path / "m.txt")
    assert code == 0
    assert "k_px_cm: 1350" in out and "max_distance_cm: 30" in out
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "k_px_cm: 1350"
    assert run(capsys, "calibrate", "distance", "--point", "0:45")[0] == 2


def test_calibrate_gaze(capsys):
    code, out, _ = run(capsys, "calibrate", "gaze", "--eye", "60:48", "--eye", "62:49.6")
    assert code == 0 and "dy_dx_ratio: 0.8000" in out and "occluded: yes" in out


def test_model_info_counts(capsys):
    code, out, _ = run(capsys, "model-info", "--task", "find_eyes")
    assert code == 0 and out.splitlines()[-1] == "total trainable parameters: 29,321"
    code, out, _ = run(capsys, "model-info", "--control")
    assert "total trainable parameters: 116,753" in out  # base 16 channels, same layer list


def test_run_without_weights_is_config_error(tmp_path, capsys):
    save_image(np.zeros((48, 64)), tmp_path / "x.pgm")
    assert run(capsys, "run", "--image", tmp_path / "x.pgm", "--out-template", tmp_path / "t")[0] == 8
    (tmp_path / "c.conf").write_text("nonsense\n")
    assert run(capsys, "run", "--image", tmp_path / "x.pgm", "--config", tmp_path / "c.conf",
               "--out-template", tmp_path / "t")[0] == 8


def test_train_divergence_exit_3(tmp_path, capsys):
    run(capsys, "synth", "--identities", 2, "--samples", 1, "--iris-radius", 25, "--out", tmp_path / "c",
        "--seed", 1)
    code, _, err = run(capsys, "train", "--task", "segment_iris", "--manifest", tmp_path / "c" / "manifest.csv",
                       "--epochs", 2, "--lr", 1e30, "--seed", 0, "--out", tmp_path / "w.bin", "--val-fraction", 0)
    assert code == 3 and re.search(r"diverged at epoch \d+", err)


def test_train_writes_weights_and_log(tmp_path, capsys):
    run(capsys, "synth", "--identities", 3, "--samples", 1, "--iris-radius", 25, "--out", tmp_path / "c",
        "--seed", 1)
    code, out, _ = run(capsys, "train", "--task", "find_eyes", "--manifest", tmp_path / "c" / "manifest.csv",
                       "--epochs", 1, "--lr", 0.01, "--seed", 4, "--flips", "--out", tmp_path / "w.bin")
    assert code == 0 and "parameters: 29321" in out
    log = (tmp_path / "w.log.csv").read_text().splitlines()
    assert log[:2] == ["# seed=4", "epoch,loss,val_iou,seconds"] and len(log) == 3


def test_benchmark_stage(tmp_path, capsys):
    run(capsys, "synth", "--identities", 1, "--samples", 1, "--iris-radius", 25, "--out", tmp_path / "c",
        "--seed", 1)
    code, out, _ = run(capsys, "benchmark", "--stage", "segment_iris", "--manifest", tmp_path / "c" / "manifest.csv",
                       "--iterations", 10, "--warmup", 2, "--out", tmp_path / "b.txt")
    assert code == 0 and "fps" in out and "parameters: 29321" in out


# -- with trained models ------------------------------------------------------------

@pytest.mark.slow
def test_run_writes_two_templates_and_replays(tmp_path, capsys, trained):
    run(capsys, "synth", "--identities", 1, "--samples", 1, "--iris-radius", 60, "--out", tmp_path / "c",
        "--seed", 3)
    code, out, err = run(capsys, "run", "--image", tmp_path / "c" / "id0000_s00.pgm", "--config", trained.config,
                         "--out-template", tmp_path / "out" / "t", "--out-debug", tmp_path / "dbg")
    assert code == 0, err
    assert (tmp_path / "out" / "t_left.irt").exists() and (tmp_path / "out" / "t_right.irt").exists()
    names = {p.name for p in (tmp_path / "dbg").iterdir()}
    assert {"input.pgm", "eye_mask.pgm", "crop_left.pgm", "iris_mask_left.pgm", "sheet_left.pgm",
            "code_left.pgm", "template_right.irt", "eyes.csv"} <= names
    assert (tmp_path / "dbg" / "eyes.csv").read_text().startswith("# seed=")
    # byte-exact replay from the saved crop
    code, _, _ = run(capsys, "run", "--crop", tmp_path / "dbg" / "crop_right.pgm", "--side", "right",
                     "--config", trained.config, "--out-template", tmp_path / "replay.irt")
    assert code == 0
    assert (tmp_path / "replay_right.irt").read_bytes() == (tmp_path / "dbg" / "template_right.irt").read_bytes()
    a = load_template(tmp_path / "out" / "t_right.irt")
    code, out, _ = run(capsys, "match", "--template", tmp_path / "out" / "t_right.irt",
                       "--template", tmp_path / "out" / "t_right.irt")
    assert "hd: 0.000000" in out and "MATCH" in out and a.eye_side == "right"


@pytest.mark.slow
def test_run_far_subject_is_exit_5(tmp_path, capsys, trained):
    run(capsys, "synth", "--identities", 1, "--samples", 1, "--iris-radius", 30, "--out", tmp_path / "c",
        "--seed", 3)
    code, _, err = run(capsys, "run", "--image", tmp_path / "c" / "id0000_s00.pgm", "--config", trained.config,
                       "--out-template", tmp_path / "t")
    assert code == 5 and "too far" in err


@pytest.mark.slow
def test_run_background_is_exit_4(tmp_path, capsys, trained):
    save_image(natural_background(4242, (640, 480)), tmp_path / "bg.pgm")
    code, _, err = run(capsys, "run", "--image", tmp_path / "bg.pgm", "--config", trained.config,
                       "--out-template", tmp_path / "t")
    assert code == 4, err


@pytest.mark.slow
def test_evaluate_report_counts(tmp_path, capsys, trained, eval_corpus):
    code, out, _ = run(capsys, "evaluate", "--manifest", eval_corpus.base / "manifest.csv", "--config",
                       trained.config, "--report", tmp_path / "rep", "--workers", 1)
    assert code == 0
    rep = (tmp_path / "rep" / "report.txt").read_text().splitlines()
    assert rep[0].startswith("# seed=")
    fields = dict(line.split(": ", 1) for line in rep[1:])
    failed = int(fields["failed_templates"])
    if failed == 0:
        assert (fields["mated_scores"], fields["non_mated_scores"]) == ("200", "4750")
    scores = (tmp_path / "rep" / "scores.csv").read_text().splitlines()
    assert len(scores) == 2 + 200 + 4750
    loc = (tmp_path / "rep" / "localization.csv").read_text().splitlines()
    assert loc[1] == "image_path,px,py,pr,ix,iy,ir,method,confidence"
    assert len(loc) == 2 + 100 - failed
    for name in ("det.csv", "fnmr_at_fmr.csv"):
        assert (tmp_path / "rep" / name).read_text().startswith("# seed=")
