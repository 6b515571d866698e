import json

import numpy as np
import pytest

from talkstyle.cli import main
from talkstyle.mesh import MeshSequence, TemplateMesh, load_msq, save_msq, save_template
from talkstyle.numerics import load_checkpoint
from talkstyle.supervision import PhonemeTiming, load_weights, save_timings


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(d), "--speakers", "2", "--sequences", "3", "--seed", "7", "--heldout", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def model(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.ckpt"
    rc = main(["train", "--manifest", str(corpus / "manifest.json"), "--out", str(out), "--epochs", "2", "--layers", "1",
               "--lr", "1e-3"])
    assert rc == 0
    return out


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--speakers", "4", "--sequences", "6", "--seed", "7"]) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    assert len(_manifest(tmp_path / "a")["sequences"]) == 24
    assert (tmp_path / "a" / "manifest.json.config.json").exists()
    main(["gen-data", "--out", str(tmp_path / "b"), "--speakers", "4", "--sequences", "6", "--seed", "7"])
    for f in (tmp_path / "a").glob("*.msq"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["gen-data", "--speakers", "1", "--sequences", "1", "--seed", "0"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--out" in err


def test_no_command_and_bad_flag():
    assert main([]) == 2
    assert main(["gen-data", "--bogus", "1"]) == 2


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("speakers=1\nsequences=1\nseed=3\nout=%s\n" % (tmp_path / "x"))
    assert main(["gen-data", "--config", str(cfg), "--seed", "4"]) == 0
    side = json.loads((tmp_path / "x" / "manifest.json.config.json").read_text())
    assert side["options"]["seed"] == 4 and side["options"]["speakers"] == 1
    (tmp_path / "bad.json").write_text(json.dumps({"speakers": 1, "colour": "red"}))
    assert main(["gen-data", "--config", str(tmp_path / "bad.json")]) == 2


def test_label_one_bilabial(tmp_path, corpus):
    e = _manifest(corpus)["sequences"][0]
    out = tmp_path / "w.txt"
    rc = main(["label", "--mesh", str(corpus / e["mesh"]), "--timings", str(corpus / e["timings"]),
               "--template", str(corpus / "template.msq"), "--out", str(out)])
    assert rc == 0
    w = load_weights(out)
    side = json.loads((tmp_path / "w.txt.config.json").read_text())
    assert side["closure_frames"] == e["closure_frames"]
    assert np.all(w[e["closure_frames"]] == 1.0)


def test_label_without_bilabials_and_bad_sigma(tmp_path, corpus):
    e = _manifest(corpus)["sequences"][0]
    save_timings(PhonemeTiming([("a", 0.0, 0.5)]), tmp_path / "a.tim")
    args = ["label", "--mesh", str(corpus / e["mesh"]), "--timings", str(tmp_path / "a.tim"),
            "--template", str(corpus / "template.msq"), "--out", str(tmp_path / "w.txt")]
    assert main(args) == 0
    assert np.all(load_weights(tmp_path / "w.txt") == 0)
    assert main(args + ["--sigma", "0"]) == 2


def test_label_missing_lip_metadata(tmp_path, corpus):
    e = _manifest(corpus)["sequences"][0]
    save_msq(MeshSequence(load_msq(corpus / "template.msq").frames), tmp_path / "bare.msq")
    rc = main(["label", "--mesh", str(corpus / e["mesh"]), "--timings", str(corpus / e["timings"]),
               "--template", str(tmp_path / "bare.msq"), "--out", str(tmp_path / "w.txt")])
    assert rc == 4


def test_missing_file_is_io_error(tmp_path, corpus):
    e = _manifest(corpus)["sequences"][0]
    rc = main(["label", "--mesh", str(tmp_path / "nope.msq"), "--timings", str(corpus / e["timings"]),
               "--template", str(corpus / "template.msq"), "--out", str(tmp_path / "w.txt")])
    assert rc == 3


def test_train_writes_checkpoint_and_loss_csv(model):
    lines = (model.parent / "m.ckpt.losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss_total,loss_mse,loss_vel,loss_lip"
    assert len(lines) == 3
    assert "dec.0.ff1.W" in load_checkpoint(model)


def test_train_is_deterministic(corpus, model, tmp_path):
    out = tmp_path / "again.ckpt"
    main(["train", "--manifest", str(corpus / "manifest.json"), "--out", str(out), "--epochs", "2", "--layers", "1",
          "--lr", "1e-3"])
    assert out.read_bytes() == model.read_bytes()
    assert (tmp_path / "again.ckpt.losses.csv").read_bytes() == (model.parent / "m.ckpt.losses.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(corpus, tmp_path):
    rc = main(["train", "--manifest", str(corpus / "manifest.json"), "--out", str(tmp_path / "d.ckpt"), "--epochs", "1",
               "--layers", "1", "--lambda-mse", "1e308", "--lambda-vel", "1e308"])
    assert rc == 6


def test_synth_and_eval_round_trip(corpus, model, tmp_path):
    e = _manifest(corpus)["sequences"][0]
    out = tmp_path / "p.msq"
    rc = main(["synth", "--checkpoint", str(model), "--features", str(corpus / e["features"]),
               "--template", str(corpus / "template.msq"), "--out", str(out), "--frames", str(e["n_frames"])])
    assert rc == 0
    seq = load_msq(out)
    assert seq.n_frames == e["n_frames"] and not seq.is_displacement
    csv_out = tmp_path / "m.csv"
    assert main(["eval", "--pred", str(out), "--gt", str(out), "--template", str(corpus / "template.msq"),
                 "--out", str(csv_out)]) == 0
    row = csv_out.read_text().splitlines()[1].split(",")
    assert [float(x) for x in row[:5]] == [0.0] * 5
    assert main(["eval", "--pred", str(out), "--gt", str(corpus / e["mesh"]), "--template",
                 str(corpus / "template.msq"), "--out", str(csv_out)]) == 0
    assert float(csv_out.read_text().splitlines()[1].split(",")[0]) > 0


def test_synth_topology_mismatch(corpus, model, tmp_path):
    e = _manifest(corpus)["sequences"][0]
    save_template(TemplateMesh(np.zeros((5, 3)), [0], [1], [0, 1]), tmp_path / "small.msq")
    rc = main(["synth", "--checkpoint", str(model), "--features", str(corpus / e["features"]),
               "--template", str(tmp_path / "small.msq"), "--out", str(tmp_path / "p.msq")])
    assert rc == 5


def test_synth_bad_checkpoint(corpus, tmp_path):
    e = _manifest(corpus)["sequences"][0]
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    rc = main(["synth", "--checkpoint", str(tmp_path / "junk.ckpt"), "--features", str(corpus / e["features"]),
               "--template", str(corpus / "template.msq"), "--out", str(tmp_path / "p.msq")])
    assert rc == 5


def test_adapt_requires_stage_options(corpus, model, tmp_path):
    rc = main(["adapt", "--checkpoint", str(model), "--manifest", str(corpus / "manifest.json"),
               "--out", str(tmp_path / "a.ckpt")])
    assert rc == 2


def test_adapt_with_zero_stage2(corpus, model, tmp_path):
    out = tmp_path / "a.ckpt"
    rc = main(["adapt", "--checkpoint", str(model), "--manifest", str(corpus / "manifest.json"), "--out", str(out),
               "--stage1-epochs", "2", "--stage2-epochs", "0", "--init-identity", "auto"])
    assert rc == 0
    rep = json.loads((tmp_path / "a.ckpt.report.json").read_text())
    assert rep["l2_lip_delta"]["stage2"] == 0.0
    assert rep["init_identity"] == 0 and len(rep["stage1_curve"]) == 2 and rep["stage2_curve"] == []
    assert "motion.adapted_style" in load_checkpoint(out)
    assert (tmp_path / "a.ckpt.config.json").exists()
