import json
import math
from importlib.resources import files

import numpy as np
import pytest
from scipy import stats

from ctmix.cli import EXIT_DATA, EXIT_FIT, EXIT_OK, EXIT_USAGE, main
from ctmix.copula import fit_copula_type
from ctmix.errors import DataError, ModelFormatError
from ctmix.evaluation import dgp_marginals, simulate_dgp
from ctmix.io import StandardizationRecord, load_csv, standardize, write_csv
from ctmix.persist import ModelFile, dumps, load_model, save_model
from ctmix.vb import FitOptions, evb_fit


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadCsv:
    def test_header(self, tmp_path):
        ds = load_csv(write(tmp_path, "a.csv", "a,b\n1,2\n3,4"))
        assert ds.names == ["a", "b"] and np.array_equal(ds.values, [[1, 2], [3, 4]])

    def test_no_header(self, tmp_path):
        ds = load_csv(write(tmp_path, "a.csv", "1,2.5\n-3e1,4\n\n"))
        assert ds.names is None and ds.n == 2 and ds.values[1, 0] == -30.0

    @pytest.mark.parametrize("text,where", [
        ("1,2\n3", "row 2"),
        ("a,b\n1,2\n3,x", "row 3"),
        ("1,nan\n", "row 1"),
        ("1,inf\n", "row 1"),
        ("", "empty"),
        ("a,b\n", "no data"),
    ])
    def test_errors_carry_location(self, tmp_path, text, where):
        with pytest.raises(DataError, match=where):
            load_csv(write(tmp_path, "bad.csv", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv")

    def test_iris(self):
        ds = load_csv(files("ctmix.data") / "iris.csv")
        assert (ds.n, ds.d) == (150, 4)
        assert ds.names == ["sepal_length", "sepal_width", "petal_length", "petal_width"]

    def test_wine(self):
        ds = load_csv(files("ctmix.data") / "wine.csv")
        assert (ds.n, ds.d) == (178, 13)

    def test_write_round_trip(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(5, 3))
        write_csv(tmp_path / "x.csv", x, ["p", "q", "r"])
        back = load_csv(tmp_path / "x.csv")
        assert np.array_equal(back.values, x) and back.names == ["p", "q", "r"]
        assert not (tmp_path / "x.csv.tmp").exists()


class TestStandardize:
    def test_two_points(self):
        z, rec = standardize(np.array([[0.0], [2.0]]))
        assert np.allclose(z.ravel(), [-1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-15)
        assert rec.to_dict()["sd_convention"] == "sample"

    def test_already_standardized(self):
        z0, _ = standardize(np.random.default_rng(1).normal(size=(40, 3)))
        z1, rec = standardize(z0)
        assert np.allclose(z1, z0, atol=1e-12)
        assert np.allclose(rec.shift, 0, atol=1e-12) and np.allclose(rec.scale, 1, atol=1e-12)

    def test_self_inverse(self):
        x = np.random.default_rng(2).normal(3, 7, size=(30, 2))
        z, rec = standardize(x)
        assert np.allclose(rec.invert(z), x, atol=1e-12)
        back = StandardizationRecord.from_dict(rec.to_dict())
        assert np.array_equal(back.apply(x), z)

    def test_zero_variance_names_column(self):
        with pytest.raises(DataError, match="width"):
            standardize(np.array([[1.0, 2.0], [3.0, 2.0]]), names=["length", "width"])

    def test_jacobian(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(300, 2)) * [4.0, 0.2] + [10.0, -1.0]
        model = evb_fit(x, "MN", FitOptions(K_init=1)).model
        rec = model.standardization
        z = rec.apply(x[:100])
        std_space = stats.multivariate_normal(model.locs[0], model.scales[0]).logpdf(z)
        assert np.allclose(model.logpdf(x[:100]), std_space - np.log(rec.scale).sum(), atol=1e-10)


@pytest.fixture(scope="module")
def ct_model():
    y = simulate_dgp(2, 300, 5, "motivating")
    return y, fit_copula_type(y, "CT-MN", dgp_marginals(2, "motivating"),
                              opts=FitOptions(K_init=2), max_iter=3)


class TestPersistence:
    @pytest.mark.parametrize("family", ["MN", "Mt", "MFA", "MtFA"])
    def test_mixture_round_trip(self, tmp_path, family):
        y = simulate_dgp(3, 200, 1)
        model = evb_fit(y, family, FitOptions(K_init=2)).model
        save_model(tmp_path / "m.json", model, {"seed": 0})
        first = (tmp_path / "m.json").read_bytes()
        mf = load_model(tmp_path / "m.json")
        pts = np.random.default_rng(0).normal(size=(100, 3))
        assert np.allclose(mf.model.logpdf(pts), model.logpdf(pts), rtol=0, atol=1e-12)
        save_model(tmp_path / "m2.json", mf)
        assert (tmp_path / "m2.json").read_bytes() == first
        assert mf.estimator == family

    def test_copula_round_trip(self, tmp_path, ct_model):
        y, model = ct_model
        save_model(tmp_path / "c.json", model)
        mf = load_model(tmp_path / "c.json")
        pts = y[:100] + 0.1
        assert np.allclose(mf.model.logpdf(pts), model.logpdf(pts), rtol=0, atol=1e-12)
        assert dumps(mf) == (tmp_path / "c.json").read_text()
        assert mf.model.iteration_log == model.iteration_log

    def test_version_mismatch(self, tmp_path, ct_model):
        data = ModelFile(ct_model[1]).to_dict()
        data["schema_version"] = 99
        (tmp_path / "v.json").write_text(json.dumps(data))
        with pytest.raises(ModelFormatError, match="schema_version"):
            load_model(tmp_path / "v.json")

    def test_truncated(self, tmp_path, ct_model):
        text = dumps(ModelFile(ct_model[1]))
        (tmp_path / "t.json").write_text(text[: len(text) // 2])
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "t.json")

    @pytest.mark.parametrize("payload", [[], {"schema_version": 1},
                                         {"schema_version": 1, "kind": "blob", "model": {}},
                                         {"schema_version": 1, "kind": "mixture", "model": {}}])
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "x.json").write_text(json.dumps(payload))
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "x.json")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> fit -> score through the command line, run twice."""
    root = tmp_path_factory.mktemp("cli")
    out = {}
    for run in ("a", "b"):
        d = root / run
        d.mkdir()
        codes = [
            main(["simulate", "--d", "2", "--n", "300", "--seed", "7", "--out", str(d / "y.csv")]),
            main(["fit", "--data", str(d / "y.csv"), "--estimator", "ct-mn", "--seed", "7",
                  "--k-init", "3", "--candidates", "kernel,implied_mix_normal",
                  "--folds-marginals", "3", "--out", str(d / "m.json"),
                  "--trace", str(d / "trace.csv")]),
            main(["fit", "--data", str(d / "y.csv"), "--estimator", "mfa", "--seed", "7",
                  "--k-init", "3", "--out", str(d / "mfa.json"), "--trace", str(d / "vb.csv")]),
            main(["compare", "--simulate", "d=2,n=100", "--estimators", "mn,nc", "--folds", "0",
                  "--reps", "2", "--n-test", "100", "--seed", "1", "--no-timing",
                  "--out", str(d / "report.csv")]),
            main(["marginals", "--data", str(d / "y.csv"), "--candidates", "kernel,univ_mix_normal",
                  "--folds", "3", "--out", str(d / "marg.csv")]),
        ]
        out[run] = (d, codes)
    return out


class TestCli:
    def test_exit_codes(self, pipeline):
        assert pipeline["a"][1] == [EXIT_OK] * 5

    def test_artifacts_byte_identical(self, pipeline):
        a, b = pipeline["a"][0], pipeline["b"][0]
        for name in ("y.csv", "m.json", "trace.csv", "mfa.json", "vb.csv", "report.csv",
                     "marg.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_simulate_output(self, pipeline):
        ds = load_csv(pipeline["a"][0] / "y.csv")
        assert ds.names == ["y1", "y2"] and ds.n == 300
        assert np.array_equal(ds.values, simulate_dgp(2, 300, 7))

    def test_model_file(self, pipeline):
        d = pipeline["a"][0]
        mf = load_model(d / "m.json")
        assert mf.estimator == "CT-MN"
        meta = mf.metadata
        assert meta["seed"] == 7 and "seed_scheme" in meta and len(meta["marginal_selection"]) == 2
        y = load_csv(d / "y.csv").values
        assert float(np.sum(mf.model.logpdf(y))) == meta["training_loglik"]

    def test_score(self, pipeline, capsys):
        d = pipeline["a"][0]
        assert main(["score", "--model", str(d / "m.json"), "--data", str(d / "y.csv")]) == 0
        value = float(capsys.readouterr().out)
        mf = load_model(d / "m.json")
        assert math.isfinite(value)
        assert value == -mf.metadata["training_loglik"] / 300

    def test_report(self, pipeline):
        lines = (pipeline["a"][0] / "report.csv").read_text().splitlines()
        assert lines[0] == "estimator,mean_lpds,sd_lpds,mean_seconds,n,d,B,seed"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["MN", "NC"]
        assert all(ln.split(",")[3] == "0.0" for ln in lines[1:])

    def test_traces(self, pipeline):
        d = pipeline["a"][0]
        assert (d / "trace.csv").read_text().startswith("iter,loglik,K\n")
        assert len((d / "vb.csv").read_text().splitlines()) > 2

    def test_marginal_table(self, pipeline):
        lines = (pipeline["a"][0] / "marg.csv").read_text().splitlines()
        assert lines[0] == "column,kernel,univ_mix_normal,chosen"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["y1", "y2"]

    @pytest.mark.parametrize("argv", [[], ["fit"], ["fit", "--bogus"], ["frobnicate"],
                                      ["simulate", "--d", "x", "--n", "3", "--out", "o"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_estimator(self, tmp_path, pipeline):
        y = pipeline["a"][0] / "y.csv"
        assert main(["fit", "--data", str(y), "--estimator", "mamn",
                     "--out", str(tmp_path / "m.json")]) == EXIT_USAGE

    def test_data_errors(self, tmp_path):
        bad = write(tmp_path, "bad.csv", "1,2\n3\n")
        assert main(["fit", "--data", str(bad), "--estimator", "mn",
                     "--out", str(tmp_path / "m.json")]) == EXIT_DATA
        junk = write(tmp_path, "junk.json", "{")
        assert main(["score", "--model", str(junk), "--data", str(bad)]) == EXIT_DATA

    def test_fit_failure(self, tmp_path):
        const = write(tmp_path, "c.csv", "a,b\n" + "1,2\n" * 30)
        code = main(["fit", "--data", str(const), "--estimator", "mn",
                     "--out", str(tmp_path / "m.json")])
        assert code in (EXIT_DATA, EXIT_FIT)
        assert not (tmp_path / "m.json").exists()

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "simulate" in capsys.readouterr().out
