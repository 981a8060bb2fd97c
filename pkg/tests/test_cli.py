import csv
import json

import numpy as np
import pytest

from specdiff.audio import AudioBuffer, read_wav, write_wav
from specdiff.cli import main, read_matrix_csv, write_matrix_csv
from specdiff.dsp import MelFilterbank, StftConfig, mel_spectrogram
from specdiff.envelope import estimate_envelope

TINY = dict(batch_size=2, segment_length=512, gen_channels=16, mpd_channels=[2, 4, 8],
            mrd_channels=2, mrd_layers=2, steps=2, checkpoint_every=1)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


def formant_mel(band=14, frames=40):
    mel = np.full((32, frames), -3.0)
    mel[band - 2:band + 3] += np.array([0.8, 2.0, 3.0, 2.0, 0.8])[:, None]
    return mel


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"kind": "formant_noise", "num_items": 3, "duration": 0.25, "seed": 2}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(root / "data")]) == 0
    return root / "data"


def test_gen_data_writes_manifest(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["items"]) == 3
    assert all((dataset / n).exists() for n in manifest["items"])


def test_gen_data_seed_flag(tmp_path, dataset):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "formant_noise", "num_items": 3, "duration": 0.25, "seed": 2}))
    main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "a"), "--seed", "2"])
    main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "b"), "--seed", "3"])
    a = read_wav(tmp_path / "a" / "formant_noise_0000.wav").samples
    b = read_wav(tmp_path / "b" / "formant_noise_0000.wav").samples
    assert np.array_equal(a, read_wav(dataset / "formant_noise_0000.wav").samples)
    assert not np.array_equal(a, b)


def test_mel_csv_shape_and_values(tmp_path, dataset):
    wav = dataset / "formant_noise_0000.wav"
    assert main(["mel", "--in", str(wav), "--out", str(tmp_path / "m.csv")]) == 0
    m = read_matrix_csv(tmp_path / "m.csv")
    buf = read_wav(wav)
    assert m.shape == (32, len(buf) // 64 + 1)
    ref = mel_spectrogram(buf, StftConfig(256, 64), MelFilterbank.htk(16000, 256, 32))
    assert np.array_equal(m, ref)  # repr() floats survive the CSV exactly


def test_noise_demo_flat(tmp_path, capsys):
    write_matrix_csv(tmp_path / "flat.csv", np.full((32, 40), -2.0))
    code, _ = run(capsys, "noise-demo", "--mel", tmp_path / "flat.csv", "--sigma", 0.05,
                  "--out", tmp_path / "n.wav", "--psd", tmp_path / "psd.csv", "--seed", 0)
    assert code == 0
    table = rows(tmp_path / "psd.csv")
    assert len(table) == 32
    assert all(abs(float(r["ratio_db"])) <= 1.0 for r in table)
    assert len(read_wav(tmp_path / "n.wav")) == 40 * 64


def test_noise_demo_formant_dip(tmp_path, capsys):
    mel = formant_mel()
    write_matrix_csv(tmp_path / "f.csv", mel)
    code, _ = run(capsys, "noise-demo", "--mel", tmp_path / "f.csv", "--out", tmp_path / "n.wav",
                  "--psd", tmp_path / "psd.csv", "--seed", 1)
    assert code == 0
    psd = 10 * np.log10([float(r["empirical"]) for r in rows(tmp_path / "psd.csv")])
    fb = MelFilterbank.htk(16000, 256, 32)
    env = 20 * np.log10(fb.weights @ estimate_envelope(mel, fb).magnitudes.mean(axis=0))
    peak = env.max() - np.median(env)
    dip = psd.min() - np.median(psd)
    assert np.argmin(psd) == np.argmax(env) == 14
    assert abs(-dip - peak) <= 1.5


def test_noise_demo_sigma_zero_silent(tmp_path, capsys):
    write_matrix_csv(tmp_path / "f.csv", formant_mel())
    code, _ = run(capsys, "noise-demo", "--mel", tmp_path / "f.csv", "--sigma", 0,
                  "--out", tmp_path / "n.wav")
    assert code == 0
    assert np.all(read_wav(tmp_path / "n.wav").samples == 0)


def test_noise_demo_deterministic(tmp_path, capsys):
    write_matrix_csv(tmp_path / "f.csv", formant_mel())
    for name in ("a", "b"):
        run(capsys, "noise-demo", "--mel", tmp_path / "f.csv", "--out", tmp_path / f"{name}.wav",
            "--seed", 7, "--realizations", 4)
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_train_synth_eval(tmp_path, dataset, capsys):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps(TINY))
    code, err = run(capsys, "train", "--config", cfg, "--data", dataset, "--out", tmp_path / "run",
                    "--mode", "spec", "--seed", 0)
    assert code == 0, err
    assert len(rows(tmp_path / "run" / "metrics.csv")) == 2
    ckpt = tmp_path / "run" / "ckpt_0000002"
    assert ckpt.is_dir()

    mel = mel_spectrogram(read_wav(dataset / "formant_noise_0000.wav"), StftConfig(256, 64),
                          MelFilterbank.htk(16000, 256, 32))
    write_matrix_csv(tmp_path / "m.csv", mel)
    (tmp_path / "hyp").mkdir()
    out = tmp_path / "hyp" / "formant_noise_0000.wav"
    assert main(["synth", "--ckpt", str(ckpt), "--mel", str(tmp_path / "m.csv"), "--out", str(out)]) == 0
    y = read_wav(out)
    assert len(y) == mel.shape[1] * 64

    assert main(["eval", "--ref", str(dataset), "--hyp", str(tmp_path / "hyp"),
                 "--out", str(tmp_path / "report.csv")]) == 0
    report = rows(tmp_path / "report.csv")
    assert [r["file"] for r in report] == ["formant_noise_0000.wav", "mean"]
    assert set(report[0]) == {"file", "mel_l1", "lsd_256", "lsd_512", "lsd_1024"}
    assert all(float(v) > 0 for k, v in report[0].items() if k != "file")


def test_eval_identical_is_zero(tmp_path, dataset):
    assert main(["eval", "--ref", str(dataset), "--hyp", str(dataset), "--out", str(tmp_path / "r.csv")]) == 0
    mean = rows(tmp_path / "r.csv")[-1]
    assert all(float(v) == 0 for k, v in mean.items() if k != "file")


@pytest.mark.parametrize("argv, kind", [
    (["mel", "--in", "/nonexistent.wav", "--out", "x.csv"], "config"),
    (["train", "--data", "/nonexistent", "--out", "o"], "config"),
])
def test_missing_paths_exit_2(tmp_path, capsys, argv, kind):
    code, err = run(capsys, *argv)
    assert code == 2 and err.startswith(f"specdiff-error:{kind}:")


def test_bad_wav_exit_2(tmp_path, capsys):
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    code, err = run(capsys, "mel", "--in", tmp_path / "bad.wav", "--out", tmp_path / "m.csv")
    assert code == 2 and err.startswith("specdiff-error:input:")


def test_bad_config_exit_2(tmp_path, dataset, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"segment_length": 100}))
    code, err = run(capsys, "train", "--config", tmp_path / "c.json", "--data", dataset,
                    "--out", tmp_path / "o")
    assert code == 2 and err.startswith("specdiff-error:config:")


def test_mel_rows_mismatch_exit_2(tmp_path, capsys):
    write_matrix_csv(tmp_path / "m.csv", np.zeros((5, 3)))
    (tmp_path / "ck").mkdir()
    code, err = run(capsys, "synth", "--ckpt", tmp_path / "ck", "--mel", tmp_path / "m.csv",
                    "--out", tmp_path / "y.wav")
    assert code == 2 and err.startswith("specdiff-error:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # NaN weights on purpose
def test_numerical_abort_exit_3(tmp_path, dataset, capsys):
    from specdiff.trainer import TrainConfig, TrainState, save_checkpoint
    cfg = TrainConfig(**{**TINY, "mpd_channels": (2, 4, 8)})
    st = TrainState.initial(cfg)
    st.generator.conv_post.weight.data[:] = np.nan
    save_checkpoint(st, tmp_path / "run")
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    code, err = run(capsys, "train", "--config", tmp_path / "c.json", "--data", dataset,
                    "--out", tmp_path / "run")
    assert code == 3 and err.startswith("specdiff-error:numerical:")
    assert (tmp_path / "run" / "abort.json").exists()
