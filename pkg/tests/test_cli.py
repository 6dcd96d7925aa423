import numpy as np
import pytest

from neuralhmm import features
from neuralhmm.cli import main
from neuralhmm.training import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert err.startswith("neuralhmm 0.1.0") or code != 0
    return code, out, err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("# tiny corpus\nnum_states = 2\ndim = 3\nutt_len = 30\nnum_utts = 5\n")
    code, out, _ = run(capsys, "synth", "--spec", spec, "--out-dir", tmp_path / "data", "--seed", 1)
    assert code == 0
    return tmp_path / "data"


def write_config(path):
    path.write_text("num_states = 2\ntime_shift = 2\nfeat_dim = 3\nhidden_dim = 4\nepochs = 2\n")
    return path


def test_extract(tmp_path, capsys):
    wavs = tmp_path / "wav"
    wavs.mkdir()
    r = np.random.default_rng(0)
    features.write_wav(wavs / "one.wav", r.integers(-2000, 2000, 16000))
    features.write_wav(wavs / "two.wav", r.integers(-2000, 2000, 8000))
    code, out, _ = run(capsys, "extract", "--wav-dir", wavs, "--out-dir", tmp_path / "f",
                       "--stats-out", tmp_path / "stats.txt")
    assert code == 0
    rows = features.read_manifest(tmp_path / "f" / "manifest.tsv")
    assert [e.utt_id for e in rows] == ["one", "two"]
    first = features.read_features(rows[0].feature_path)
    assert first.frames.shape == (98, 40)
    code, _, _ = run(capsys, "extract", "--wav-dir", wavs, "--out-dir", tmp_path / "g",
                     "--stats-in", tmp_path / "stats.txt")
    assert code == 0
    for name in ("one.lmf", "two.lmf"):
        assert (tmp_path / "f" / name).read_bytes() == (tmp_path / "g" / name).read_bytes()


def test_extract_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "extract", "--wav-dir", tmp_path / "empty", "--out-dir", tmp_path / "o")
    assert code == 2 and "no input files" in err
    wavs = tmp_path / "w"
    wavs.mkdir()
    features.write_wav(wavs / "ok.wav", np.zeros(1000, dtype=np.int16))
    features.write_wav(wavs / "bad.wav", np.zeros(100, dtype=np.int16))
    code, out, err = run(capsys, "extract", "--wav-dir", wavs, "--out-dir", tmp_path / "o")
    assert code == 2 and "too short" in err and "1 failed" in out


def test_pretrain_decode_eval(tmp_path, capsys, synth_dir):
    cfg = write_config(tmp_path / "cfg.txt")
    man = synth_dir / "manifest.tsv"
    code, out, _ = run(capsys, "pretrain", "--config", cfg, "--manifest", man, "--out", tmp_path / "m")
    assert code == 0 and "final mean loss" in out
    assert "hop = 1" in (tmp_path / "m" / "config.txt").read_text()
    assert len((tmp_path / "m" / "loss.log").read_text().splitlines()) == 10
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--manifest", man, "--out", tmp_path / "m")
    assert code == 1 and "--force" in err

    ckpt = tmp_path / "m" / "final.nhmm"
    for name in ("c1.txt", "c2.txt"):
        assert run(capsys, "decode", "--checkpoint", ckpt, "--manifest", man,
                   "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "c1.txt").read_bytes() == (tmp_path / "c2.txt").read_bytes()

    code, out, _ = run(capsys, "eval", "--codes", tmp_path / "c1.txt", "--manifest", man,
                       "--metric", "nmi", "--csv", tmp_path / "r.csv")
    assert code == 0 and out.startswith("nmi")
    assert (tmp_path / "r.csv").read_text().startswith("metric,value\nnmi,")
    code, out, _ = run(capsys, "eval", "--codes", tmp_path / "c1.txt", "--manifest", man,
                       "--metric", "seg")
    assert code == 0 and "f1" in out
    code, out, _ = run(capsys, "eval", "--manifest", man, "--metric", "probe",
                       "--checkpoint", ckpt, "--train-fraction", 0.6)
    assert code == 0 and "frame_error_rate" in out


def oracle_codes(man, path, k, constant=False):
    with open(path, "w") as fh:
        for e in features.read_manifest(man):
            labs = features.labels_to_frames(features.read_labels(e.label_path))[k:]
            codes = [0] * len(labs) if constant else [int(l) for l in labs]
            fh.write(e.utt_id + " " + " ".join(map(str, codes)) + "\n")


def test_eval_oracle_codes(tmp_path, capsys, synth_dir):
    man = synth_dir / "manifest.tsv"
    oracle_codes(man, tmp_path / "perfect.txt", k=2)
    _, out, _ = run(capsys, "eval", "--codes", tmp_path / "perfect.txt", "--manifest", man,
                    "--metric", "nmi")
    assert out.split() == ["nmi", "1.000000"]
    _, out, _ = run(capsys, "eval", "--codes", tmp_path / "perfect.txt", "--manifest", man,
                    "--metric", "seg")
    assert "f1              1.000000" in out
    oracle_codes(man, tmp_path / "const.txt", k=2, constant=True)
    _, out, _ = run(capsys, "eval", "--codes", tmp_path / "const.txt", "--manifest", man,
                    "--metric", "nmi")
    assert out.split() == ["nmi", "0.000000"]
    _, out, _ = run(capsys, "eval", "--codes", tmp_path / "const.txt", "--manifest", man,
                    "--metric", "seg")
    assert "hyp_boundaries  0.000000" in out


def test_variants_share_parameter_count(tmp_path, capsys, synth_dir):
    cfg = write_config(tmp_path / "cfg.txt")
    man = synth_dir / "manifest.tsv"
    outs = {}
    for variant in ("neural_hmm", "vq_apc"):
        code, out, _ = run(capsys, "pretrain", "--config", cfg, "--manifest", man,
                           "--out", tmp_path / variant, "--variant", variant, "--seed", 3)
        assert code == 0
        outs[variant] = out
    count = [line for line in outs["neural_hmm"].splitlines() if line.startswith("parameters")]
    assert count and count[0] in outs["vq_apc"]
    assert ((tmp_path / "neural_hmm" / "loss.log").read_text()
            != (tmp_path / "vq_apc" / "loss.log").read_text())


def test_pretrain_rerun_identical(tmp_path, capsys, synth_dir):
    cfg = write_config(tmp_path / "cfg.txt")
    man = synth_dir / "manifest.tsv"
    for name in ("a", "b"):
        assert run(capsys, "pretrain", "--config", cfg, "--manifest", man, "--out", tmp_path / name,
                   "--hop", 7, "--set", "time_shift=1")[0] == 0
    assert (tmp_path / "a" / "loss.log").read_bytes() == (tmp_path / "b" / "loss.log").read_bytes()
    assert load_checkpoint(tmp_path / "a" / "final.nhmm").model_config.hop == 7


def test_config_validation(tmp_path, capsys, synth_dir):
    man = synth_dir / "manifest.tsv"
    cfg = write_config(tmp_path / "cfg.txt")
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--manifest", man,
                       "--out", tmp_path / "x", "--hop", 0)
    assert code == 1 and "hop" in err
    bad = tmp_path / "bad.txt"
    bad.write_text("num_states = 2\nlearning_rat = 0.1\n")
    code, _, err = run(capsys, "pretrain", "--config", bad, "--manifest", man, "--out", tmp_path / "y")
    assert code == 1 and "learning_rat" in err
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--manifest", man, "--out",
                       tmp_path / "z", "--set", "learning_rate=-1")
    assert code == 1 and "learning_rate" in err


def test_decode_single_state_checkpoint(tmp_path, capsys, synth_dir):
    cfg = write_config(tmp_path / "cfg.txt")
    man = synth_dir / "manifest.tsv"
    run(capsys, "pretrain", "--config", cfg, "--manifest", man, "--out", tmp_path / "m",
        "--num-states", 1, "--epochs", 1)
    run(capsys, "decode", "--checkpoint", tmp_path / "m" / "final.nhmm", "--manifest", man,
        "--out", tmp_path / "c.txt")
    for line in (tmp_path / "c.txt").read_text().splitlines():
        assert set(line.split()[1:]) == {"0"}


def test_selfcheck_pass_and_mutation(capsys):
    code, out, _ = run(capsys, "selfcheck", "--seeds", 3)
    assert code == 0 and out.count("PASS") == 3
    code, out, _ = run(capsys, "selfcheck", "--seeds", 3, "--inject-fault", "xi-sign")
    assert code == 2 and "FAIL  posteriors" in out and "FAIL  gradients" in out


def test_usage_error_exit_code(capsys):
    assert main(["pretrain"]) == 1
