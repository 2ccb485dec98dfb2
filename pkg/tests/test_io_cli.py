import csv
import json
import struct
import zlib

import numpy as np
import pytest

from conftest import raw_crops, write_pngs
from scsc import cli
from scsc.core import TrainTrace, project_filters
from scsc.io import (
    CorruptFileError,
    dictionary_from_bytes,
    dictionary_to_bytes,
    filter_mosaic,
    read_dictionary,
    write_dictionary,
)


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    return write_pngs(tmp_path_factory.mktemp("imgs"), raw_crops(3, 20, seed=2))


@pytest.fixture(scope="module")
def dict_file(tmp_path_factory):
    f = project_filters(np.random.default_rng(0).standard_normal((4, 5, 5)))
    path = tmp_path_factory.mktemp("dict") / "d.cscd"
    write_dictionary(path, f)
    return path


class TestCscd:
    def test_layout(self):
        f = np.arange(18, dtype=float).reshape(2, 3, 3)
        blob = dictionary_to_bytes(f)
        assert blob[:4] == b"CSCD"
        assert struct.unpack_from("<HII", blob, 4) == (1, 2, 3)
        payload = blob[14:-4]
        assert np.array_equal(np.frombuffer(payload, "<f8"), np.arange(18.0))
        assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(payload)

    def test_roundtrip(self, tmp_path):
        f = np.random.default_rng(1).standard_normal((3, 5, 5))
        write_dictionary(tmp_path / "a.cscd", f)
        assert np.array_equal(read_dictionary(tmp_path / "a.cscd"), f)

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
        lambda b: b[:-1],
        lambda b: b[:20] + bytes([b[20] ^ 1]) + b[21:],
        lambda b: b[:5],
    ])
    def test_corruption_detected(self, mutate):
        blob = dictionary_to_bytes(np.ones((2, 3, 3)))
        with pytest.raises(CorruptFileError):
            dictionary_from_bytes(mutate(blob))


def test_mosaic_geometry():
    mos = filter_mosaic(np.random.default_rng(0).standard_normal((5, 3, 3)), scale=2)
    # 3x2 grid of 6-pixel tiles with 1-pixel gaps
    assert mos.shape == (2 * 7 + 1, 3 * 7 + 1)
    assert mos.min() == 0.0 and mos.max() == 1.0


def run(argv):
    return cli.main([str(a) for a in argv])


class TestCli:
    def test_train_batch_outputs(self, image_dir, tmp_path):
        out = tmp_path / "run"
        code = run(["train-batch", "--input", image_dir, "--out", out, "--filters", 4, "--filter-size", 5,
                    "--subsample", 0.5, "--max-outer", 3, "--seed", 7])
        assert code == 0
        assert sorted(p.name for p in out.iterdir()) == ["dict.cscd", "filters.png", "manifest.json", "trace.csv"]
        trace = TrainTrace.from_csv(out / "trace.csv")
        assert len(trace) <= 3
        with open(out / "trace.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "wall_s", "objective", "test_objective", "test_psnr_db", "nnz_frac"]
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "train-batch" and man["seed"] == 7 and len(man["inputs"]) == 3
        for key in ("config", "outputs", "version", "started_at", "finished_at"):
            assert key in man

    def test_byte_identical_dictionaries(self, image_dir, tmp_path):
        args = ["--input", image_dir, "--filters", 3, "--filter-size", 5, "--subsample", 0.3, "--max-outer", 2,
                "--seed", 1, "--no-mosaic"]
        assert run(["train-batch", *args, "--out", tmp_path / "a"]) == 0
        assert run(["train-batch", *args, "--out", tmp_path / "b", "--workers", 2]) == 0
        assert (tmp_path / "a/dict.cscd").read_bytes() == (tmp_path / "b/dict.cscd").read_bytes()

    def test_rerun_from_manifest(self, image_dir, tmp_path):
        assert run(["train-online", "--input", image_dir, "--out", tmp_path / "a", "--filters", 3,
                    "--filter-size", 5, "--minibatch", 2, "--steps", 3, "--subsample", 0.5]) == 0
        assert run(["rerun", "--manifest", tmp_path / "a/manifest.json", "--out", tmp_path / "b"]) == 0
        a = TrainTrace.from_csv(tmp_path / "a/trace.csv").column("objective")
        b = TrainTrace.from_csv(tmp_path / "b/trace.csv").column("objective")
        assert a == b
        assert (tmp_path / "a/dict.cscd").read_bytes() == (tmp_path / "b/dict.cscd").read_bytes()

    def test_train_online_with_test_dir(self, image_dir, tmp_path):
        out = tmp_path / "run"
        assert run(["train-online", "--input", image_dir, "--test-dir", image_dir, "--out", out, "--filters", 3,
                    "--filter-size", 5, "--steps", 4]) == 0
        rows = TrainTrace.from_csv(out / "trace.csv").rows
        assert [r.iter for r in rows if r.test_psnr_db is not None] == [1, 2, 4]

    def test_train_online_without_test_dir(self, image_dir, tmp_path):
        out = tmp_path / "run"
        assert run(["train-online", "--input", image_dir, "--out", out, "--filters", 3, "--filter-size", 5]) == 0
        rows = TrainTrace.from_csv(out / "trace.csv").rows
        assert len(rows) == 3 and all(r.test_objective is None for r in rows)

    @pytest.mark.parametrize("bad", [["--subsample", 0], ["--subsample", 1.5], ["--filter-size", 4],
                                     ["--filters", 0], ["--lambda", -1], ["--bogus"]])
    def test_usage_errors(self, image_dir, tmp_path, bad, capsys):
        out = tmp_path / "run"
        assert run(["train-batch", "--input", image_dir, "--out", out, *bad]) == 1
        assert not out.exists()
        assert capsys.readouterr().err

    def test_missing_input_is_io_error(self, tmp_path):
        out = tmp_path / "run"
        assert run(["train-batch", "--input", tmp_path / "nope", "--out", out]) == 2
        assert not out.exists()

    def test_corrupt_dictionary_is_io_error(self, image_dir, tmp_path):
        bad = tmp_path / "bad.cscd"
        bad.write_bytes(b"CSCD garbage")
        assert run(["reconstruct", "--dict", bad, "--input", image_dir, "--out", tmp_path / "r"]) == 2

    def test_numerical_failure_cleans_up(self, image_dir, tmp_path, monkeypatch):
        from scsc.core import NumericalError

        def boom(*a, **k):
            raise NumericalError("diverged")

        monkeypatch.setattr(cli.drivers, "train_sbcsc", boom)
        out = tmp_path / "existing"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert run(["train-batch", "--input", image_dir, "--out", out]) == 3
        assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]

    def test_partial_outputs_removed(self, image_dir, tmp_path, monkeypatch):
        def fail(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(cli, "save_mosaic", fail)
        out = tmp_path / "run"
        assert run(["train-batch", "--input", image_dir, "--out", out, "--filters", 2, "--filter-size", 3,
                    "--max-outer", 1]) == 2
        assert not out.exists()

    def test_env_override(self, image_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("SCSC_FILTERS", "2")
        monkeypatch.setenv("SCSC_FILTER_SIZE", "3")
        monkeypatch.setenv("SCSC_MAX_OUTER", "1")
        assert run(["train-batch", "--input", image_dir, "--out", tmp_path / "a"]) == 0
        assert read_dictionary(tmp_path / "a/dict.cscd").shape == (2, 3, 3)
        # explicit flag beats the environment
        assert run(["train-batch", "--input", image_dir, "--out", tmp_path / "b", "--filters", 3]) == 0
        assert read_dictionary(tmp_path / "b/dict.cscd").shape == (3, 3, 3)

    def test_env_required_flag(self, image_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("SCSC_INPUT", str(image_dir))
        monkeypatch.setenv("SCSC_NO_MOSAIC", "1")
        assert run(["train-batch", "--out", tmp_path / "a", "--filters", 2, "--filter-size", 3,
                    "--max-outer", 1]) == 0
        assert not (tmp_path / "a/filters.png").exists()

    def test_reconstruct(self, image_dir, dict_file, tmp_path):
        out = tmp_path / "r"
        assert run(["reconstruct", "--dict", dict_file, "--input", image_dir, "--out", out]) == 0
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 and all(float(r["psnr_db"]) > 0 for r in rows)
        assert len(list(out.glob("recon_*.png"))) == 3

    def test_inpaint(self, image_dir, dict_file, tmp_path):
        out = tmp_path / "i"
        assert run(["inpaint", "--dict", dict_file, "--input", image_dir, "--out", out, "--observe", 0.5,
                    "--trials", 2, "--admm-iters", 10]) == 0
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6 and {r["trial"] for r in rows} == {"0", "1"}

    def test_bench(self, image_dir, tmp_path):
        out = tmp_path / "b"
        assert run(["bench", "--input", image_dir, "--out", out, "--filters", 3, "--filter-size", 5,
                    "--p-values", "1,0.2", "--iters", 2]) == 0
        with open(out / "bench.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["p", "iter", "code_update_s", "filter_update_s", "objective"]
        assert [(r[0], r[1]) for r in rows[1:]] == [("1.0", "1"), ("1.0", "2"), ("0.2", "1"), ("0.2", "2")]

    def test_bad_manifest_schema(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"schema": 99, "command": "train-batch"}))
        assert run(["rerun", "--manifest", tmp_path / "m.json", "--out", tmp_path / "o"]) == 1
