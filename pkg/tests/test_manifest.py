import pytest

from voxmap.manifest import (CohortManifest, ManifestError, SubjectRecord,
                             read_manifest, write_manifest)


def write_csv(tmp_path, text):
    p = tmp_path / "manifest.csv"
    p.write_text(text)
    return p


class TestReadManifest:
    def test_two_rows(self, tmp_path):
        p = write_csv(tmp_path, (
            "id,sex,age,image,mask_lv,lvv\n"
            "s1,female,55.25,s1/img.nii.gz,s1/lv.nii.gz,120.5\n"
            "s2,male,61.0,s2/img.nii.gz,s2/lv.nii.gz,140\n"
        ))
        man = read_manifest(p)
        assert len(man) == 2
        assert man.records[0].id == "s1"
        assert man.records[0].age == pytest.approx(55.25)
        assert man.records[0].masks == {"lv": "s1/lv.nii.gz"}
        assert man.records[1].covariates["lvv"] == pytest.approx(140.0)

    def test_order_preserved(self, tmp_path):
        rows = "".join(f"s{i},male,50,img{i}\n" for i in (5, 2, 9, 1))
        man = read_manifest(write_csv(tmp_path, "id,sex,age,image\n" + rows))
        assert [r.id for r in man] == ["s5", "s2", "s9", "s1"]

    def test_duplicate_id_names_it(self, tmp_path):
        p = write_csv(tmp_path, (
            "id,sex,age,image\nsA,male,50,x\nsA,male,51,y\n"))
        with pytest.raises(ManifestError, match="sA"):
            read_manifest(p)

    def test_missing_column(self, tmp_path):
        with pytest.raises(ManifestError, match="sex"):
            read_manifest(write_csv(tmp_path, "id,age,image\ns1,50,x\n"))

    def test_non_numeric_age(self, tmp_path):
        p = write_csv(tmp_path, "id,sex,age,image\ns1,male,fifty,x\n")
        with pytest.raises(ManifestError, match="non-numeric age"):
            read_manifest(p)

    def test_missing_age_loads_fine(self, tmp_path):
        # association-time concern, not a load error
        p = write_csv(tmp_path, "id,sex,age,image\ns1,male,,x\n")
        man = read_manifest(p)
        assert man.records[0].age is None

    def test_bad_sex(self, tmp_path):
        p = write_csv(tmp_path, "id,sex,age,image\ns1,other,50,x\n")
        with pytest.raises(ManifestError, match="sex"):
            read_manifest(p)


class TestManifestApi:
    def _man(self):
        return CohortManifest([
            SubjectRecord("a", "female", {"age": 50.0}),
            SubjectRecord("b", "male", {"age": 60.0}),
            SubjectRecord("c", "female", {"age": 55.0}),
        ])

    def test_get_and_missing(self):
        man = self._man()
        assert man.get("b").sex == "male"
        with pytest.raises(ManifestError, match="zz"):
            man.get("zz")

    def test_subset_by_sex(self):
        man = self._man()
        fem = man.subset(sex="female")
        assert [r.id for r in fem] == ["a", "c"]

    def test_reference_must_exist(self):
        with pytest.raises(ManifestError):
            CohortManifest([SubjectRecord("a", "male")], reference_id="nope")

    def test_round_trip(self, tmp_path):
        man = CohortManifest([
            SubjectRecord("a", "female", {"age": 50.25, "lvv": 100.0},
                          image="a/i.nii.gz", masks={"lv": "a/lv.nii.gz"}),
            SubjectRecord("b", "male", {"age": 64.0, "lvv": 150.0},
                          image="b/i.nii.gz", masks={"lv": "b/lv.nii.gz"}),
        ])
        write_manifest(man, tmp_path / "m.csv")
        back = read_manifest(tmp_path / "m.csv")
        assert [r.id for r in back] == ["a", "b"]
        assert back.records[0].covariates["lvv"] == pytest.approx(100.0)
        assert back.records[1].masks["lv"] == "b/lv.nii.gz"
        assert back.records[0].age == pytest.approx(50.25)
