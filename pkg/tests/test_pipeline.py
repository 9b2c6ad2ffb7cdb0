import json

import numpy as np
import pytest

from forgemask.alignment import AffineTransform, AlignmentConfig, AlignmentStats
from forgemask.imagecore import ImageBuffer, ParameterError, Rect, decode_image, encode_image
from forgemask.pipeline import (
    AnnotationRecord,
    PipelineConfig,
    PipelineError,
    QualityGateConfig,
    annotate_pair,
    build_dataset,
    manifest_fingerprint,
    profile_run,
    quality_gate,
)
from forgemask.semanticmask import BuiltinFeatureSource

from conftest import textured_image


def _stats(kp_a=500, kp_b=500, matches=100, ratio=0.9):
    return AlignmentStats(
        keypoints_original=kp_a,
        keypoints_edited=kp_b,
        match_count=matches,
        inlier_count=int(matches * ratio),
        inlier_ratio=ratio,
        transform=AffineTransform.identity(),
        crop_rect=Rect(0, 0, 1, 1),
    )


class TestQualityGate:
    def test_boundary_table(self):
        cfg = QualityGateConfig()
        cases = [
            (_stats(kp_a=9), False, "keypoints"),
            (_stats(kp_b=9), False, "keypoints"),
            (_stats(kp_a=10, kp_b=10), True, None),
            (_stats(matches=9), False, "matches"),
            (_stats(matches=10, ratio=0.60), True, None),
            (_stats(ratio=0.59), False, "inlier_ratio"),
            (_stats(ratio=0.60), True, None),
            (_stats(ratio=3 / 5), True, None),
        ]
        for stats, want_ok, want_reason in cases:
            v = quality_gate(stats, cfg)
            assert v.accepted is want_ok, stats
            assert v.reason == want_reason

    def test_first_violation_wins(self):
        v = quality_gate(_stats(kp_a=3, matches=2, ratio=0.1), QualityGateConfig())
        assert v.reason == "keypoints"
        v = quality_gate(_stats(matches=2, ratio=0.1), QualityGateConfig())
        assert v.reason == "matches"

    def test_loosening_never_rejects(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            stats = _stats(
                kp_a=int(rng.integers(0, 40)),
                kp_b=int(rng.integers(0, 40)),
                matches=int(rng.integers(0, 40)),
                ratio=float(rng.uniform(0, 1)),
            )
            tight = QualityGateConfig(
                min_keypoints=int(rng.integers(1, 20)),
                min_matches=int(rng.integers(1, 20)),
                min_inlier_ratio=float(rng.uniform(0.1, 1.0)),
            )
            loose = QualityGateConfig(
                min_keypoints=max(1, tight.min_keypoints - 5),
                min_matches=max(1, tight.min_matches - 5),
                min_inlier_ratio=max(0.01, tight.min_inlier_ratio - 0.2),
            )
            if quality_gate(stats, tight).accepted:
                assert quality_gate(stats, loose).accepted

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            QualityGateConfig(min_keypoints=0)
        with pytest.raises(ParameterError):
            QualityGateConfig(min_inlier_ratio=0.0)
        with pytest.raises(ParameterError):
            QualityGateConfig(min_inlier_ratio=1.5)


def _write_pair(dirpath, pid, seed, size=160, edit="patch"):
    """Write an (original, edited) PNG pair; returns paths and the truth mask array."""
    img = textured_image(seed, size)
    orig_p = dirpath / f"{pid}_orig.png"
    edit_p = dirpath / f"{pid}_edit.png"
    orig_p.write_bytes(encode_image(img))
    truth = np.zeros((size, size), np.uint8)
    if edit == "identical":
        edit_p.write_bytes(encode_image(img))
    elif edit == "patch":
        rng = np.random.default_rng(seed + 1000)
        arr = img.data.copy()
        y0, x0, side = 48, 64, 64
        hue = rng.integers(0, 256, 3)
        arr[y0 : y0 + side, x0 : x0 + side] = np.clip(
            hue + rng.normal(0, 60, (side, side, 3)), 0, 255
        ).astype(np.uint8)
        truth[y0 : y0 + side, x0 : x0 + side] = 1
        edit_p.write_bytes(encode_image(ImageBuffer.from_array(arr)))
    elif edit == "flat":
        flat = ImageBuffer.from_array(np.full((size, size, 3), 128, np.uint8))
        orig_p.write_bytes(encode_image(flat))
        edit_p.write_bytes(encode_image(flat))
    elif edit == "missing":
        edit_p = dirpath / f"{pid}_edit_does_not_exist.png"
    return orig_p, edit_p, truth


def _cfg(workers=1):
    return PipelineConfig(
        alignment=AlignmentConfig(),
        workers=workers,
        feature_factory=lambda pid: BuiltinFeatureSource(8),
    )


class TestAnnotatePair:
    def test_patch_edit_accepted(self, tmp_path):
        orig, edit, truth = _write_pair(tmp_path, "a", 21)
        rec = annotate_pair(orig, edit, _cfg(), pair_id="a", mask_dir=tmp_path / "masks")
        assert rec.verdict == "accepted"
        assert rec.alignment["match_count"] >= 10
        assert rec.mask["feature_source"] == "builtin:patch=8"
        png = (tmp_path / "masks" / "a.png").read_bytes()
        mask_img = decode_image(png)
        assert (mask_img.width, mask_img.height) == (128, 128)
        bits = (mask_img.plane() != 0).astype(np.uint8)
        assert bits.any()
        # IoU against the downsampled truth patch
        ty = (np.arange(128) + 0.5) * truth.shape[0] / 128
        truth128 = truth[ty.astype(int)][:, ty.astype(int)]
        iou = (bits & truth128).sum() / (bits | truth128).sum()
        assert iou >= 0.5

    def test_identical_pair_fails_annotation(self, tmp_path):
        orig, edit, _ = _write_pair(tmp_path, "b", 22, edit="identical")
        rec = annotate_pair(orig, edit, _cfg(), pair_id="b", mask_dir=tmp_path / "masks")
        assert rec.verdict == "failed(annotation: degenerate histogram)"
        assert not (tmp_path / "masks" / "b.png").exists()

    def test_flat_pair_fails_detection(self, tmp_path):
        orig, edit, _ = _write_pair(tmp_path, "c", 23, edit="flat")
        rec = annotate_pair(orig, edit, _cfg(), pair_id="c")
        assert rec.verdict == "failed(alignment: detection)"

    def test_missing_file_fails_io(self, tmp_path):
        orig, edit, _ = _write_pair(tmp_path, "d", 24, edit="missing")
        rec = annotate_pair(orig, edit, _cfg(), pair_id="d")
        assert rec.verdict == "failed(io)"
        assert rec.alignment is None and rec.mask is None

    def test_garbage_file_fails_io(self, tmp_path):
        orig, _, _ = _write_pair(tmp_path, "e", 25)
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image at all")
        rec = annotate_pair(orig, bad, _cfg(), pair_id="e")
        assert rec.verdict == "failed(io)"

    def test_timings_recorded(self, tmp_path):
        orig, edit, _ = _write_pair(tmp_path, "f", 26)
        rec = annotate_pair(orig, edit, _cfg(), pair_id="f")
        assert set(rec.timings) == {"alignment", "features", "similarity_threshold", "io"}
        assert rec.timings["alignment"] > 0


def _listing(tmp_path, rows):
    p = tmp_path / "listing.csv"
    lines = ["pair_id,original_path,edited_path,editing_task"]
    lines += [",".join(r) for r in rows]
    p.write_text("\n".join(lines) + "\n")
    return p


def _standard_listing(tmp_path, n_good=4):
    rows = []
    for i in range(n_good):
        orig, edit, _ = _write_pair(tmp_path, f"g{i:02d}", 30 + i)
        rows.append((f"g{i:02d}", str(orig), str(edit), "subject-change"))
    orig, edit, _ = _write_pair(tmp_path, "ident", 50, edit="identical")
    rows.append(("ident", str(orig), str(edit), "no-op"))
    orig, edit, _ = _write_pair(tmp_path, "gone", 51, edit="missing")
    rows.append(("gone", str(orig), str(edit), "subject-change"))
    return _listing(tmp_path, rows)


class TestBuildDataset:
    def test_end_to_end_counts_and_layout(self, tmp_path, capsys):
        listing = _standard_listing(tmp_path)
        manifest = build_dataset(listing, tmp_path / "out", _cfg(), split_ratio=0.75, seed=3)
        v = manifest.summary["verdicts"]
        assert v == {"accepted": 4, "rejected": 0, "failed": 2}
        assert manifest.summary["reasons"] == {
            "annotation: degenerate histogram": 1,
            "io": 1,
        }
        assert manifest.summary["splits"] == {"train": 3, "test": 1, "none": 2}
        assert (tmp_path / "out" / "manifest.jsonl").exists()
        assert (tmp_path / "out" / "summary.json").exists()
        mask_files = sorted(p.name for p in (tmp_path / "out" / "masks").glob("*.png"))
        assert mask_files == ["g00.png", "g01.png", "g02.png", "g03.png"]
        printed = capsys.readouterr().out
        assert "accepted 4" in printed
        # manifest sorted by pair_id
        ids = [json.loads(l)["pair_id"] for l in (tmp_path / "out" / "manifest.jsonl").read_text().splitlines()]
        assert ids == sorted(ids)

    def test_deterministic_across_runs(self, tmp_path):
        listing = _standard_listing(tmp_path)
        build_dataset(listing, tmp_path / "o1", _cfg(), seed=9)
        build_dataset(listing, tmp_path / "o2", _cfg(), seed=9)
        assert manifest_fingerprint(tmp_path / "o1" / "manifest.jsonl") == manifest_fingerprint(
            tmp_path / "o2" / "manifest.jsonl"
        )
        for name in ("g00.png", "g03.png"):
            assert (tmp_path / "o1" / "masks" / name).read_bytes() == (
                tmp_path / "o2" / "masks" / name
            ).read_bytes()

    def test_parallel_matches_serial(self, tmp_path):
        listing = _standard_listing(tmp_path)
        build_dataset(listing, tmp_path / "ser", _cfg(workers=1), seed=4)
        build_dataset(listing, tmp_path / "par", _cfg(workers=3), seed=4)
        assert manifest_fingerprint(tmp_path / "ser" / "manifest.jsonl") == manifest_fingerprint(
            tmp_path / "par" / "manifest.jsonl"
        )

    def test_resume_skips_done_pairs(self, tmp_path):
        rows = []
        for i in range(2):
            orig, edit, _ = _write_pair(tmp_path, f"r{i}", 60 + i)
            rows.append((f"r{i}", str(orig), str(edit), "t"))
        partial = _listing(tmp_path, rows[:1])
        out = tmp_path / "out"
        build_dataset(partial, out, _cfg(), seed=1)
        first = {
            json.loads(l)["pair_id"]: json.loads(l)["timestamp"]
            for l in (out / "manifest.jsonl").read_text().splitlines()
        }

        full = _listing(tmp_path, rows)
        manifest = build_dataset(full, out, _cfg(), seed=1)
        assert len(manifest.records) == 2
        after = {r.pair_id: r.timestamp for r in manifest.records}
        assert after["r0"] == first["r0"]  # untouched on resume

    def test_split_ratio_arithmetic(self, tmp_path):
        # 20 accepted records, ratio 0.9 -> 18 train / 2 test
        rows = []
        for i in range(20):
            orig, edit, _ = _write_pair(tmp_path, f"s{i:02d}", 100 + i, size=192)
            rows.append((f"s{i:02d}", str(orig), str(edit), "t"))
        listing = _listing(tmp_path, rows)
        m = build_dataset(listing, tmp_path / "out", _cfg(), split_ratio=0.9, seed=5)
        assert m.summary["splits"]["train"] == 18
        assert m.summary["splits"]["test"] == 2
        m2 = build_dataset(listing, tmp_path / "out2", _cfg(), split_ratio=0.9, seed=5)
        assert [r.split for r in m.records] == [r.split for r in m2.records]

    def test_listing_problems_abort(self, tmp_path):
        with pytest.raises(PipelineError):
            build_dataset(tmp_path / "absent.csv", tmp_path / "out", _cfg())
        bad = tmp_path / "bad.csv"
        bad.write_text("pair_id,original_path\nx,y\n")
        with pytest.raises(PipelineError, match="lacks columns"):
            build_dataset(bad, tmp_path / "out", _cfg())
        orig, edit, _ = _write_pair(tmp_path, "z", 70)
        dup = _listing(tmp_path, [("z", str(orig), str(edit), "t")] * 2)
        with pytest.raises(PipelineError, match="duplicate"):
            build_dataset(dup, tmp_path / "out", _cfg())

    def test_bad_split_ratio(self, tmp_path):
        listing = _listing(tmp_path, [])
        with pytest.raises(ParameterError):
            build_dataset(listing, tmp_path / "out", _cfg(), split_ratio=0.0)


class TestProfileRun:
    def _rec(self, timings):
        return AnnotationRecord(
            pair_id="x",
            original_path="a",
            edited_path="b",
            editing_task="t",
            verdict="accepted",
            timings=timings,
        )

    def test_illustrative_percentages(self):
        rec = self._rec(
            {"alignment": 5.0, "features": 72.0, "similarity_threshold": 18.0, "io": 5.0}
        )
        rep = profile_run([rec])
        assert rep.percentages == {
            "alignment": 5.0,
            "features": 72.0,
            "similarity_threshold": 18.0,
            "io": 5.0,
        }
        assert not rep.partial

    def test_single_stage_hundred_percent(self):
        rec = self._rec({"alignment": 2.5, "features": 0.0, "similarity_threshold": 0.0, "io": 0.0})
        rep = profile_run([rec])
        assert rep.percentages["alignment"] == 100.0

    def test_all_zero_flags_partial(self):
        rec = self._rec({s: 0.0 for s in ("alignment", "features", "similarity_threshold", "io")})
        rep = profile_run([rec])
        assert rep.partial and rep.total_seconds == 0.0

    def test_missing_stage_flags_partial(self):
        rep = profile_run([self._rec({"alignment": 1.0})])
        assert rep.partial
        assert rep.percentages["alignment"] == 100.0

    def test_sums_across_records(self):
        a = self._rec({"alignment": 1.0, "features": 1.0, "similarity_threshold": 1.0, "io": 1.0})
        b = self._rec({"alignment": 3.0, "features": 1.0, "similarity_threshold": 1.0, "io": 1.0})
        rep = profile_run([a, b])
        assert rep.percentages["alignment"] == pytest.approx(40.0)
        assert rep.total_seconds == pytest.approx(10.0)
