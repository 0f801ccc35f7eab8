import json

import numpy as np
import pytest

from metahunt.formats import (
    FormatError, StudyBundle, bundle_from_simulation, pipeline_from_dict, pipeline_to_dict,
    read_csv, read_pipeline, rows_to_csv, write_pipeline,
)
from metahunt.pipeline import PipelineConfig, fit_pipeline
from metahunt.simulation import GenerativeConfig, generate


@pytest.fixture(scope="module")
def data():
    return generate(GenerativeConfig(m=30, seed=1), 120)


def test_bundle_roundtrip_bytes(tmp_path, data):
    b = bundle_from_simulation(data)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    b.write(p1)
    StudyBundle.read(p1).write(p2)
    assert p1.read_bytes() == p2.read_bytes()
    W, F = StudyBundle.read(p1).arrays()
    assert np.array_equal(W, data.W) and np.array_equal(F, data.F_hat)


def test_bundle_preserves_unknown_fields(tmp_path, data):
    d = bundle_from_simulation(data).to_dict()
    d["provenance"] = {"lab": "x"}
    d["studies"][0]["site"] = "north"
    d["meta"]["note"] = 1
    b = StudyBundle.from_dict(json.loads(json.dumps(d)))
    out = b.to_dict()
    assert out["provenance"] == {"lab": "x"}
    assert out["studies"][0]["site"] == "north" and out["meta"]["note"] == 1


def test_bundle_errors(data):
    d = bundle_from_simulation(data).to_dict()
    bad = dict(d, meta={})
    with pytest.raises(FormatError, match="format_version"):
        StudyBundle.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["studies"][0]["f_hat"] = bad["studies"][0]["f_hat"][:-1]
    with pytest.raises(FormatError, match="study 0"):
        StudyBundle.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["studies"][1]["W"] = [0.0]
    with pytest.raises(FormatError, match="covariate dimension"):
        StudyBundle.from_dict(bad)
    with pytest.raises(FormatError):
        StudyBundle.from_dict({"grid": {}})


def test_artifact_roundtrip_bitwise(tmp_path, data):
    for kind in ("dirichlet", "logratio"):
        pipe = fit_pipeline(data.W, data.F_hat, data.grid, PipelineConfig(weight_model=kind))
        path = tmp_path / f"{kind}.json"
        write_pipeline(pipe, path, {"chosen_k": 4})
        again, raw = read_pipeline(path)
        assert raw["chosen_k"] == 4
        assert np.array_equal(again.predict_values(data.W), pipe.predict_values(data.W))


def test_artifact_hash_checked(data):
    pipe = fit_pipeline(data.W, data.F_hat, data.grid)
    d = pipeline_to_dict(pipe)
    d["basis"]["values"][0][0] += 1.0
    with pytest.raises(FormatError, match="hash"):
        pipeline_from_dict(d)
    pipeline_from_dict(d, verify=False)


def test_csv(tmp_path):
    text = rows_to_csv([{"k": 1, "e": 0.1, "c": None}, {"k": np.int64(2), "e": np.float64(1 / 3),
                                                        "c": "x"}], ["k", "e", "c"])
    assert text == "k,e,c\n1,0.1,\n2,0.3333333333333333,x\n"
    p = tmp_path / "t.csv"
    p.write_text(text)
    assert float(read_csv(p)[1]["e"]) == 1 / 3
