import numpy as np
import pytest

from factorcast import data as dio
from factorcast import simulator as sim


@pytest.fixture
def small_dataset():
    cfg = sim.SimConfig(zeta=0.4, n_patients=10, max_steps=8, horizon=2, seed=13)
    return sim.generate_dataset(cfg)


def test_dataset_file_roundtrip_is_exact(tmp_path, small_dataset):
    path = tmp_path / "ds.jsonl"
    dio.save_dataset(path, small_dataset)
    loaded = dio.load_dataset(path)
    assert loaded.equals(small_dataset)
    assert loaded.max_abs_outcome == small_dataset.max_abs_outcome
    assert loaded.treated_fraction == small_dataset.treated_fraction
    # byte-identical rewrite
    path2 = tmp_path / "ds2.jsonl"
    dio.save_dataset(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_file_requires_metadata(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": 0, "split": "train", "x": [[1.0]], "a": [0], "y": [1.0]}\n')
    with pytest.raises(dio.ParseError):
        dio.load_dataset(p)


def test_trajectory_rejects_inconsistent_lengths():
    with pytest.raises(ValueError):
        dio.Trajectory(patient_id=0, covariates=np.zeros((3, 2)),
                       treatments=np.zeros(2), outcomes=np.zeros(3))


def test_csv_roundtrip(tmp_path, small_dataset):
    path = tmp_path / "long.csv"
    dio.export_longitudinal_csv(path, small_dataset)
    loaded = dio.ingest_longitudinal_csv(path, dio.CsvSchema(split_column="split"))
    assert loaded.equals(small_dataset)


def _write_csv(tmp_path, rows, header="patient_id,step,c1,c2,treatment,outcome"):
    p = tmp_path / "in.csv"
    p.write_text("\n".join([header] + rows) + "\n")
    return p


def test_variable_lengths_grouped(tmp_path):
    rows = []
    for pid, length in [(1, 5), (2, 9), (3, 12)]:
        for s in range(length):
            rows.append(f"{pid},{s},0.1,{s * 0.3},1,{0.5 + s}")
    p = _write_csv(tmp_path, rows)
    ds = dio.ingest_longitudinal_csv(p, split_fractions=(1.0 - 1e-9, 0.0))
    assert sorted(len(t) for t in ds.trajectories) == [5, 9, 12]


def test_duplicate_id_step_names_line(tmp_path):
    rows = ["1,0,0.1,0.2,1,0.5", "1,1,0.1,0.2,0,0.6", "1,1,0.1,0.2,0,0.7"]
    p = _write_csv(tmp_path, rows)
    with pytest.raises(dio.ParseError) as exc:
        dio.ingest_longitudinal_csv(p)
    assert exc.value.line == 4
    assert "duplicate" in str(exc.value)


def test_non_binary_treatment_rejected(tmp_path):
    rows = ["1,0,0.1,0.2,1,0.5", "1,1,0.1,0.2,2,0.6"]
    p = _write_csv(tmp_path, rows)
    with pytest.raises(dio.ParseError) as exc:
        dio.ingest_longitudinal_csv(p)
    assert exc.value.line == 3
    assert "non-binary" in str(exc.value)


def test_missing_column_rejected(tmp_path):
    p = _write_csv(tmp_path, ["1,0,0.5,0.5"], header="patient_id,step,c1,outcome")
    with pytest.raises(dio.ParseError) as exc:
        dio.ingest_longitudinal_csv(p)
    assert "treatment" in str(exc.value)


def test_out_of_order_steps_rejected(tmp_path):
    rows = ["1,3,0.1,0.2,1,0.5", "1,1,0.1,0.2,0,0.6"]
    p = _write_csv(tmp_path, rows)
    with pytest.raises(dio.ParseError) as exc:
        dio.ingest_longitudinal_csv(p)
    assert exc.value.line == 3


def test_split_assignment_without_split_column(tmp_path):
    rows = []
    for pid in range(10):
        rows.append(f"{pid},0,0.1,0.2,1,0.5")
        rows.append(f"{pid},1,0.1,0.2,0,0.6")
    p = _write_csv(tmp_path, rows)
    ds = dio.ingest_longitudinal_csv(p, split_fractions=(0.7, 0.2))
    tags = [t.split for t in ds.trajectories]
    assert tags.count("train") == 7 and tags.count("val") == 2 and tags.count("test") == 1
