import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from forgemask.cli import main
from forgemask.imagecore import ImageBuffer, decode_image, encode_image
from forgemask.pipeline import PipelineConfig, build_dataset
from forgemask.semanticmask import BuiltinFeatureSource, extract_features_builtin, store_feature_file

from conftest import textured_image


def _pair(tmp_path, seed=21, size=160):
    img = textured_image(seed, size)
    rng = np.random.default_rng(seed + 1000)
    arr = img.data.copy()
    y0, x0, side = 48, 64, 64
    hue = rng.integers(0, 256, 3)
    arr[y0 : y0 + side, x0 : x0 + side] = np.clip(
        hue + rng.normal(0, 60, (side, side, 3)), 0, 255
    ).astype(np.uint8)
    edited = ImageBuffer.from_array(arr)
    orig_p = tmp_path / "orig.png"
    edit_p = tmp_path / "edit.png"
    orig_p.write_bytes(encode_image(img))
    edit_p.write_bytes(encode_image(edited))
    return orig_p, edit_p, img, edited


class TestAlignCommand:
    def test_writes_outputs(self, tmp_path, capsys):
        orig, edit, _, _ = _pair(tmp_path)
        rc = main(
            ["align", "--original", str(orig), "--edited", str(edit), "--out-dir", str(tmp_path / "a")]
        )
        assert rc == 0
        for name in ("aligned_original.png", "aligned_edited.png", "stats.json"):
            assert (tmp_path / "a" / name).exists()
        stats = json.loads((tmp_path / "a" / "stats.json").read_text())
        assert len(stats["affine"]) == 6
        assert stats["inlier_ratio"] > 0.5
        printed = json.loads(capsys.readouterr().out)
        assert printed == stats

    def test_missing_file_returns_error(self, tmp_path, capsys):
        rc = main(
            [
                "align",
                "--original",
                str(tmp_path / "nope.png"),
                "--edited",
                str(tmp_path / "nope.png"),
                "--out-dir",
                str(tmp_path),
            ]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestAnnotateCommand:
    def test_builtin_features(self, tmp_path, capsys):
        orig, edit, _, _ = _pair(tmp_path)
        mask_out = tmp_path / "mask.png"
        rc = main(
            [
                "annotate",
                "--original",
                str(orig),
                "--edited",
                str(edit),
                "--builtin-features",
                "--patch",
                "8",
                "--mask-out",
                str(mask_out),
            ]
        )
        assert rc == 0
        mask = decode_image(mask_out.read_bytes())
        assert (mask.width, mask.height) == (128, 128)
        assert set(np.unique(mask.plane())) <= {0, 255}
        stats = json.loads(capsys.readouterr().out)
        assert stats["mask"]["feature_source"] == "builtin:patch=8"
        assert 0.0 < stats["mask"]["edited_fraction"] < 1.0

    def test_precomputed_feature_files(self, tmp_path, capsys):
        orig, edit, img, edited = _pair(tmp_path)
        fa = tmp_path / "a.fmap"
        fb = tmp_path / "b.fmap"
        store_feature_file(extract_features_builtin(img, 8), fa)
        store_feature_file(extract_features_builtin(edited, 8), fb)
        rc = main(
            [
                "annotate",
                "--original",
                str(orig),
                "--edited",
                str(edit),
                "--features-a",
                str(fa),
                "--features-b",
                str(fb),
                "--mask-out",
                str(tmp_path / "m.png"),
            ]
        )
        assert rc == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["mask"]["feature_source"].startswith("fmap:")

    def test_feature_flags_must_pair(self, tmp_path, capsys):
        orig, edit, _, _ = _pair(tmp_path)
        rc = main(
            [
                "annotate",
                "--original",
                str(orig),
                "--edited",
                str(edit),
                "--features-a",
                "x.fmap",
                "--mask-out",
                str(tmp_path / "m.png"),
            ]
        )
        assert rc == 1
        assert "together" in capsys.readouterr().err

    def test_requires_some_feature_mode(self, tmp_path, capsys):
        orig, edit, _, _ = _pair(tmp_path)
        rc = main(
            [
                "annotate",
                "--original",
                str(orig),
                "--edited",
                str(edit),
                "--mask-out",
                str(tmp_path / "m.png"),
            ]
        )
        assert rc == 1


class TestLossCommand:
    def _setup(self, tmp_path):
        img = textured_image(5, 128)
        fmap = extract_features_builtin(img, 8)  # 16x16 grid
        fpath = tmp_path / "f.fmap"
        store_feature_file(fmap, fpath)
        mask = np.zeros((128, 128), np.uint8)
        mask[32:64, 32:96] = 255
        mpath = tmp_path / "m.png"
        mpath.write_bytes(encode_image(ImageBuffer.from_array(mask)))
        return fpath, mpath

    def test_json_output(self, tmp_path, capsys):
        fpath, mpath = self._setup(tmp_path)
        rc = main(["loss", "--features", str(fpath), "--mask", str(mpath), "--tau", "0.5"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert set(out) == {"contrastive", "dice", "focal", "total"}
        assert out["dice"] == pytest.approx(0.0, abs=1e-3)  # truth doubles as prediction
        assert out["focal"] < 1e-6
        assert np.isfinite(out["contrastive"])

    def test_pred_npy(self, tmp_path, capsys):
        fpath, mpath = self._setup(tmp_path)
        pred = np.full((128, 128), 0.5)
        ppath = tmp_path / "pred.npy"
        np.save(ppath, pred)
        rc = main(
            ["loss", "--features", str(fpath), "--mask", str(mpath), "--pred", str(ppath)]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["dice"] > 0.1  # uniform 0.5 prediction is far from the truth


class TestEvalCommand:
    def test_macro_default(self, tmp_path, capsys):
        truth_dir = tmp_path / "truth"
        pred_dir = tmp_path / "pred"
        truth_dir.mkdir()
        pred_dir.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            t = rng.integers(0, 2, (32, 32)).astype(np.uint8) * 255
            (truth_dir / f"m{i}.png").write_bytes(encode_image(ImageBuffer.from_array(t)))
            (pred_dir / f"m{i}.png").write_bytes(encode_image(ImageBuffer.from_array(t)))
        rc = main(["eval", "--pred-dir", str(pred_dir), "--truth-dir", str(truth_dir)])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["mode"] == "macro"
        assert out["n_pairs"] == 3
        assert out["f1"] == 1.0

    def test_missing_prediction(self, tmp_path, capsys):
        truth_dir = tmp_path / "truth"
        pred_dir = tmp_path / "pred"
        truth_dir.mkdir()
        pred_dir.mkdir()
        t = np.eye(8, dtype=np.uint8) * 255
        (truth_dir / "only.png").write_bytes(encode_image(ImageBuffer.from_array(t)))
        rc = main(["eval", "--pred-dir", str(pred_dir), "--truth-dir", str(truth_dir)])
        assert rc == 1
        assert "missing" in capsys.readouterr().err


def _built_manifest(tmp_path, n=2):
    rows = ["pair_id,original_path,edited_path,editing_task"]
    for i in range(n):
        orig, edit, _, _ = _pair(tmp_path, seed=40 + i)
        o2 = tmp_path / f"o{i}.png"
        e2 = tmp_path / f"e{i}.png"
        orig.rename(o2)
        edit.rename(e2)
        rows.append(f"p{i},{o2},{e2},task")
    listing = tmp_path / "list.csv"
    listing.write_text("\n".join(rows) + "\n")
    cfg = PipelineConfig(feature_factory=lambda pid: BuiltinFeatureSource(8))
    build_dataset(listing, tmp_path / "ds", cfg, seed=1)
    return tmp_path / "ds" / "manifest.jsonl"


class TestSweepCommand:
    def test_oracle_grid(self, tmp_path, capsys):
        manifest = _built_manifest(tmp_path)
        out_csv = tmp_path / "sweep.csv"
        rc = main(
            ["sweep", "--manifest", str(manifest), "--pred-cmd", "oracle", "--out", str(out_csv)]
        )
        assert rc == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 10
        assert all(float(r[1]) == 1.0 for r in rows[1:])

    def test_external_command_template(self, tmp_path):
        manifest = _built_manifest(tmp_path, n=1)
        out_csv = tmp_path / "sweep.csv"
        ones = (
            "python3 -c 'import sys; from PIL import Image; "
            'im = Image.open(sys.argv[1]); Image.new("L", im.size, 255).save(sys.argv[2])\' '
            "{image} {out}"
        )
        rc = main(["sweep", "--manifest", str(manifest), "--pred-cmd", ones, "--out", str(out_csv)])
        assert rc == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        recall_col = 4
        assert all(float(r[recall_col]) == 1.0 for r in rows)
        assert all(0.0 < float(r[1]) < 1.0 for r in rows)  # all-ones is imprecise but complete


class TestBuildCommand:
    def test_builtin_build(self, tmp_path, capsys):
        rows = ["pair_id,original_path,edited_path,editing_task"]
        for i in range(2):
            orig, edit, _, _ = _pair(tmp_path, seed=60 + i)
            o2 = tmp_path / f"bo{i}.png"
            e2 = tmp_path / f"be{i}.png"
            orig.rename(o2)
            edit.rename(e2)
            rows.append(f"b{i},{o2},{e2},restyle")
        listing = tmp_path / "list.csv"
        listing.write_text("\n".join(rows) + "\n")
        rc = main(
            [
                "build",
                "--listing",
                str(listing),
                "--out",
                str(tmp_path / "out"),
                "--patch",
                "8",
                "--workers",
                "2",
            ]
        )
        assert rc == 0
        assert (tmp_path / "out" / "manifest.jsonl").exists()
        assert (tmp_path / "out" / "summary.json").exists()
        assert "accepted" in capsys.readouterr().out

    def test_fmap_dir_features(self, tmp_path, capsys):
        orig, edit, img, edited = _pair(tmp_path, seed=70)
        fdir = tmp_path / "fmaps"
        fdir.mkdir()
        store_feature_file(extract_features_builtin(img, 8), fdir / "q0_original.fmap")
        store_feature_file(extract_features_builtin(edited, 8), fdir / "q0_edited.fmap")
        listing = tmp_path / "list.csv"
        listing.write_text(
            "pair_id,original_path,edited_path,editing_task\n" f"q0,{orig},{edit},task\n"
        )
        rc = main(
            [
                "build",
                "--listing",
                str(listing),
                "--out",
                str(tmp_path / "out"),
                "--features",
                f"fmap-dir:{fdir}",
            ]
        )
        assert rc == 0
        rec = json.loads((tmp_path / "out" / "manifest.jsonl").read_text().splitlines()[0])
        assert rec["verdict"] == "accepted"
        assert rec["mask"]["feature_source"].startswith("fmap:")

    def test_bad_features_spec(self, tmp_path, capsys):
        listing = tmp_path / "list.csv"
        listing.write_text("pair_id,original_path,edited_path,editing_task\n")
        rc = main(
            [
                "build",
                "--listing",
                str(listing),
                "--out",
                str(tmp_path / "out"),
                "--features",
                "magic",
            ]
        )
        assert rc == 1
        assert "--features" in capsys.readouterr().err


class TestParser:
    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            main(["transmogrify"])

    def test_console_script_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "forgemask.cli", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "align" in proc.stdout and "build" in proc.stdout
