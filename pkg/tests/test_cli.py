import csv

import pytest
import yaml

from sslv.cli import CONFIG_ERROR, OK, ConfigError, load_config, main, parse_config

MODEL = dict(T=0.1, r_d=0.02, r_f=0.01, L=50, H=84.5, kappa_v=2, xi_v=0.3, theta_v=0.1, kappa_r=0.3, xi_r=5,
             theta_r=-0.2, rho_vr=0.4, S0=65, v0=0.5, rho_xy0=-0.7)
TINY = dict(n_s=15, n_v=9, n_r=9)


def write(tmp_path, cfg, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_validate_accepts_shipped_configs():
    for name in ("heston_limit", "desk_ss1", "desk_ssj"):
        assert main(["validate", f"configs/{name}.yaml"]) == OK


def test_kou_rate_must_exceed_one(tmp_path, capsys):
    cfg = {"model": MODEL, "jumps": {"L_s": dict(phi=0.3, p=0.3, theta1=0.9, theta2=4, b=3)}}
    assert main(["validate", write(tmp_path, cfg)]) == CONFIG_ERROR
    assert "jumps.L_s.theta1" in capsys.readouterr().err


@pytest.mark.parametrize("patch, field", [
    ({"model": dict(MODEL, kappa_vv=1)}, "model.kappa_vv"),
    ({"model": dict(MODEL, rho_xy0=1.5)}, "model.rho_xy0"),
    ({"model": dict(MODEL, v0=-1)}, "model"),
    ({"grid": dict(n_s=3)}, "grid.n_s"),
    ({"scheme": dict(method="lu")}, "scheme.method"),
    ({"contracts": [dict(kind="european_call", K=65, Tmat=1)]}, "contracts[0].Tmat"),
    ({"contracts": [dict(kind="european_call")]}, "contracts[0]"),
    ({"skew": dict(maturities=[0.105])}, "skew"),
])
def test_errors_name_the_field(patch, field):
    cfg = {"model": MODEL}
    cfg.update(patch)
    with pytest.raises(ConfigError) as err:
        parse_config(cfg)
    assert str(err.value).startswith(field)


def test_jump_grid_extension_defaults():
    cfg = load_config("configs/desk_ssj.yaml")
    assert cfg.jumps.is_active() and cfg.grid.extra_s != (0, 0)


def test_frozen_model_prices_payoff_at_the_deposit_node(tmp_path):
    model = dict(MODEL, r_d=0.0, r_f=0.0, kappa_v=0.0, xi_v=0.0, v0=1e-12, theta_v=0.0, kappa_r=0.0, xi_r=0.0,
                 rho_vr=0.0, rho_xy0=0.0, T=0.01)
    cfg = {"model": model, "grid": TINY, "scheme": dict(dt=0.01),
           "contracts": [dict(kind="european_call", K=50), dict(kind="european_put", K=70)]}
    out = tmp_path / "run"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == OK
    prices = [float(r["price"]) for r in rows(out / "prices.csv")]
    assert prices == pytest.approx([15.0, 5.0], abs=1e-6)


def small_run_config():
    return {"model": MODEL, "grid": TINY, "scheme": dict(dt=0.05, explicit=True, mixed_stencil="central"),
            "contracts": [dict(kind="european_call", K="ATM"), dict(kind="double_no_touch")],
            "skew": dict(maturities=[0.05, 0.1]), "dnt": dict(maturities=[0.1]),
            "slices": dict(T=0.1, planes=["Sv", "vR"]),
            "checks": dict(positivity_tol=1e9)}


def test_run_writes_artifacts_and_is_reproducible(tmp_path):
    path = write(tmp_path, small_run_config())
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", path, "--out", str(a)]) == OK
    assert main(["run", path, "--out", str(b)]) == OK
    names = ["prices.csv", "report.csv", "report_summary.csv", "skew.csv", "dnt.csv", "density_Sv.csv",
             "density_vR.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(rows(a / "report.csv")) == 2 * 2
    assert [r["T"] for r in rows(a / "skew.csv")] == ["0.050000000000000003", "0.10000000000000001"]

    diff = tmp_path / "diff"
    assert main(["compare", str(a), str(b), "--out", str(diff)]) == OK
    for name in ("skew_diff.csv", "dnt_iv_diff.csv", "prices_diff.csv"):
        for r in rows(diff / name):
            assert r["difference"] in ("", "0")


def test_compare_rejects_mismatched_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d, K in ((a, 60), (b, 70)):
        d.mkdir()
        (d / "prices.csv").write_text(f"kind,K,T,L,H,L_slope,price\neuropean_call,{K},0.5,,,0,1\n")
    assert main(["compare", str(a), str(b), "--out", str(tmp_path / "d")]) == CONFIG_ERROR


def test_oracle_mismatch_sets_exit_code(tmp_path):
    cfg = {"model": dict(MODEL, kappa_r=0, xi_r=0, rho_vr=0), "grid": TINY, "scheme": dict(dt=0.05),
           "contracts": [dict(kind="european_call", K="ATM")], "oracle": dict(heston=True, tol=1e-6),
           "checks": dict(positivity_tol=1e9)}
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3
    r = rows(tmp_path / "o" / "prices.csv")[0]
    assert float(r["oracle"]) > 0 and r["rel_diff"] != ""
