import hashlib
import shutil

import numpy as np
import pytest
from click.testing import CliRunner

from voxmap.cli import main
from voxmap.manifest import read_manifest
from voxmap.nifti import read_volume, write_volume
from voxmap.render import correlation_color, render_slices
from voxmap.volume import Volume


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    """A small registered cohort shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli_cohort")
    cfg = root / "cfg.yaml"
    cfg.write_text(f"""
data_root: {root}/cohort
output_dir: {root}/out
jobs: 2
phantom:
  n: 4
  seed: 77
  dims: [48, 48, 48]
  deformation_amplitude: 2.0
  deformation_wavelengths: [48.0]
  volume_jitter:
    lv: 0.25
slic:
  seed_spacing: 10
""")
    runner = CliRunner()
    r = runner.invoke(main, ["phantom", "--config", str(cfg)])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["select-template", "--manifest",
                             f"{root}/cohort/manifest.csv"])
    assert r.exit_code == 0, r.output
    reference = r.output.strip().split(": ")[1]
    r = runner.invoke(main, ["register", "--manifest",
                             f"{root}/cohort/manifest.csv",
                             "--reference", reference,
                             "--config", str(cfg)])
    assert r.exit_code == 0, r.output
    return root, cfg, reference


class TestPhantomCommand:
    def test_outputs_exist(self, cohort_dir):
        root, cfg, _ = cohort_dir
        man = read_manifest(root / "cohort" / "manifest.csv")
        assert len(man) == 4
        for rec in man:
            assert rec.image_path(root / "cohort").exists()

    def test_rerun_identical_checksums(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(f"""
data_root: {tmp_path}/a
phantom: {{n: 2, seed: 5, dims: [24, 24, 24], deformation_amplitude: 1.0,
           deformation_wavelengths: [24.0]}}
""")
        runner = CliRunner()
        assert runner.invoke(main, ["phantom", "--config", str(cfg)]
                             ).exit_code == 0
        h1 = {p.name: sha(p) for p in (tmp_path / "a").rglob("*.nii.gz")}
        shutil.rmtree(tmp_path / "a")
        assert runner.invoke(main, ["phantom", "--config", str(cfg)]
                             ).exit_code == 0
        h2 = {p.name: sha(p) for p in (tmp_path / "a").rglob("*.nii.gz")}
        assert h1 == h2

    def test_n_zero_rejected(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("phantom: {n: 0}")
        r = CliRunner().invoke(main, ["phantom", "--config", str(cfg)])
        assert r.exit_code != 0
        assert "n must be" in r.output

    def test_negative_n_rejected(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("phantom: {n: -3}")
        r = CliRunner().invoke(main, ["phantom", "--config", str(cfg)])
        assert r.exit_code != 0


class TestSelectTemplateCommand:
    def test_single_sex_manifest_one_template(self, tmp_path):
        from voxmap.phantom import CohortSpec, PhantomSpec, generate_cohort
        generate_cohort(PhantomSpec(dims=(24, 24, 24)),
                        CohortSpec(n=3, seed=1, sex="female",
                                   deformation_amplitude=0.0),
                        tmp_path)
        r = CliRunner().invoke(
            main, ["select-template", "--manifest",
                   str(tmp_path / "manifest.csv"), "--stratify-by-sex"])
        assert r.exit_code == 0, r.output
        lines = [ln for ln in r.output.strip().splitlines() if ": " in ln]
        assert len(lines) == 1
        assert lines[0].startswith("female:")

    def test_stratified_two_templates(self, cohort_dir):
        root, cfg, _ = cohort_dir
        r = CliRunner().invoke(
            main, ["select-template", "--manifest",
                   f"{root}/cohort/manifest.csv", "--stratify-by-sex",
                   "--out", f"{root}/sel"])
        assert r.exit_code == 0, r.output
        strata = dict(ln.split(": ") for ln in r.output.strip().splitlines())
        assert set(strata) == {"female", "male"}
        assert (root / "sel" / "selection_female_age.csv").exists()
        assert (root / "sel" / "template_male.txt").exists()

    def test_empty_stratum_error_names_it(self, tmp_path):
        from voxmap.phantom import CohortSpec, PhantomSpec, generate_cohort
        generate_cohort(PhantomSpec(dims=(24, 24, 24)),
                        CohortSpec(n=2, seed=1, sex="male",
                                   deformation_amplitude=0.0),
                        tmp_path)
        r = CliRunner().invoke(
            main, ["select-template", "--manifest",
                   str(tmp_path / "manifest.csv"), "--sex", "female"])
        assert r.exit_code != 0
        assert "female" in r.output


class TestRegisterCommand:
    def test_artifacts_and_qc(self, cohort_dir):
        root, cfg, reference = cohort_dir
        out = root / "out"
        man = read_manifest(root / "cohort" / "manifest.csv")
        for rec in man:
            assert (out / "fields" / f"{rec.id}.nii.gz").exists()
            assert (out / "warped" / f"{rec.id}.nii.gz").exists()
            assert (out / "jd" / f"{rec.id}.nii.gz").exists()
        qc = (out / "qc.csv").read_text().strip().splitlines()
        assert len(qc) == 1 + len(man)  # header + one row per subject
        assert (out / "region_stats.csv").exists()
        assert (out / "aggregate" / "hu_mean.nii.gz").exists()

    def test_self_inclusion_dice_one(self, cohort_dir):
        root, cfg, reference = cohort_dir
        import csv as _csv
        with open(root / "out" / "qc.csv") as fh:
            rows = {r["subject"]: r for r in _csv.DictReader(fh)}
        assert float(rows[reference]["dice_lv"]) >= 0.99
        assert float(rows[reference]["dice_myo"]) >= 0.99

    def test_energy_monotone_in_qc(self, cohort_dir):
        root, cfg, reference = cohort_dir
        import csv as _csv
        with open(root / "out" / "qc.csv") as fh:
            for row in _csv.DictReader(fh):
                assert float(row["max_block_delta"]) <= 0.0
                assert float(row["checkpoint_error"]) < 1e-6

    def test_missing_mask_skips_subject_exit_2(self, cohort_dir, tmp_path):
        root, cfg, reference = cohort_dir
        broken = tmp_path / "broken"
        shutil.copytree(root / "cohort", broken)
        victim = next(s for s in ("sub000", "sub001", "sub002")
                      if s != reference)
        (broken / victim / "mask_lv.nii.gz").unlink()
        broken_cfg = tmp_path / "broken.yaml"
        broken_cfg.write_text(f"data_root: {broken}\n")
        r = CliRunner().invoke(
            main, ["register", "--manifest", str(broken / "manifest.csv"),
                   "--reference", reference, "--config", str(broken_cfg),
                   "--out", str(tmp_path / "out2"), "--jobs", "2"])
        assert r.exit_code == 2
        assert victim in r.output
        qc = (tmp_path / "out2" / "qc.csv").read_text()
        assert "skipped" in qc

    def test_unknown_reference_fatal(self, cohort_dir, tmp_path):
        root, cfg, _ = cohort_dir
        r = CliRunner().invoke(
            main, ["register", "--manifest", f"{root}/cohort/manifest.csv",
                   "--reference", "ghost", "--config", str(cfg),
                   "--out", str(tmp_path / "o")])
        assert r.exit_code == 1


class TestAnalyzeCommand:
    def test_analysis_outputs(self, cohort_dir):
        root, cfg, reference = cohort_dir
        r = CliRunner().invoke(
            main, ["analyze", "--manifest", f"{root}/cohort/manifest.csv",
                   "--reference", reference, "--covariate", "lvv",
                   "--channel", "both", "--config", str(cfg),
                   "--explicit-table"])
        assert r.exit_code == 0, r.output
        adir = root / "out" / "analysis"
        for name in ("supervoxels.nii.gz", "supervoxels.csv",
                     "correlation_jd_lvv.nii.gz", "correlation_jd_lvv.csv",
                     "correlation_hu_lvv.nii.gz",
                     "explicit_correlations.csv"):
            assert (adir / name).exists(), name

    def test_reentrant_consumes_only_artifacts(self, cohort_dir, tmp_path):
        # analysis works from persisted registration outputs alone
        root, cfg, reference = cohort_dir
        from voxmap.config import load_config
        from voxmap.pipeline import run_analyze
        cfg_obj = load_config(cfg)
        man = read_manifest(root / "cohort" / "manifest.csv")
        res = run_analyze(man, reference, "age", ["jd"], cfg_obj,
                          out_dir=root / "out")
        assert "jd" in res
        assert res["jd"].r.size > 0

    def test_unknown_covariate_lists_available(self, cohort_dir):
        root, cfg, reference = cohort_dir
        r = CliRunner().invoke(
            main, ["analyze", "--manifest", f"{root}/cohort/manifest.csv",
                   "--reference", reference, "--covariate", "bogus",
                   "--channel", "jd", "--config", str(cfg)])
        assert r.exit_code == 1
        assert "bogus" in r.output
        assert "lvv" in r.output  # lists what is available


class TestRenderCommand:
    def test_render_cli(self, cohort_dir, tmp_path):
        root, cfg, reference = cohort_dir
        r = CliRunner().invoke(
            main, ["render",
                   "--map", f"{root}/out/analysis/correlation_jd_lvv.nii.gz",
                   "--template", f"{root}/cohort/{reference}/image.nii.gz",
                   "--slices", "10,24", "--out", str(tmp_path / "png")])
        assert r.exit_code == 0, r.output
        assert (tmp_path / "png" / "slice_z0010.png").exists()
        assert (tmp_path / "png" / "colorbar.png").exists()

    def test_out_of_range_slice_error(self, cohort_dir, tmp_path):
        root, cfg, reference = cohort_dir
        r = CliRunner().invoke(
            main, ["render",
                   "--map", f"{root}/out/analysis/correlation_jd_lvv.nii.gz",
                   "--template", f"{root}/cohort/{reference}/image.nii.gz",
                   "--slices", "480", "--out", str(tmp_path / "png2")])
        assert r.exit_code == 1
        assert "out of range" in r.output

    def test_all_insignificant_overlay_equals_base(self, tmp_path, rng):
        template = Volume(rng.normal(40, 20, (8, 8, 8)).astype(np.float32))
        painted = Volume(np.zeros((8, 8, 8), np.float32))
        render_slices(painted, template, [4], out_dir=tmp_path / "a",
                      prefix="s")
        import matplotlib.image as mpimg
        img = mpimg.imread(tmp_path / "a" / "s_z0004.png")
        # pure grayscale everywhere: R == G == B
        assert np.array_equal(img[..., 0], img[..., 1])
        assert np.array_equal(img[..., 1], img[..., 2])

    def test_max_positive_is_max_red(self, tmp_path, rng):
        template = Volume(np.zeros((6, 6, 6), np.float32))
        painted = Volume(np.zeros((6, 6, 6), np.float32))
        painted.values[3, 2, 2] = 1.0
        render_slices(painted, template, [3], out_dir=tmp_path / "b",
                      prefix="s")
        import matplotlib.image as mpimg
        img = mpimg.imread(tmp_path / "b" / "s_z0003.png")
        # row 2 from the bottom -> flipped row index 6-1-2 = 3
        pix = img[3, 2, :3]
        expected = correlation_color(1.0)
        assert np.allclose(pix, expected, atol=1 / 255)

    def test_correlation_colormap_ends(self):
        r_pos = correlation_color(1.0)
        r_neg = correlation_color(-1.0)
        assert r_pos[0] > 0.9 and r_pos[2] < 0.1   # red end
        assert r_neg[2] > 0.9 and r_neg[0] < 0.1   # blue end


class TestRegisterIdempotence:
    def test_rerun_byte_identical_fields(self, cohort_dir, tmp_path):
        root, cfg, reference = cohort_dir
        out2 = tmp_path / "out_again"
        r = CliRunner().invoke(
            main, ["register", "--manifest", f"{root}/cohort/manifest.csv",
                   "--reference", reference, "--config", str(cfg),
                   "--out", str(out2), "--jobs", "1"])
        assert r.exit_code == 0, r.output
        for sub in ("sub000", "sub002"):
            a = root / "out" / "fields" / f"{sub}.nii.gz"
            b = out2 / "fields" / f"{sub}.nii.gz"
            assert sha(a) == sha(b)
