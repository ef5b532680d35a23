import io

import numpy as np
import pytest

from fdloss import plotting, verify
from fdloss.autodiff import Tensor, relu
from fdloss.cam import HeatMap
from fdloss.distance import cosine_term, exp_euclidean_term
from fdloss.fusion import Report
from fdloss.gradcheck import GradCheck, check_gradients

PNG = b"\x89PNG\r\n\x1a\n"


def test_sign_mutation_fails_gradient_check():
    res = verify.pair_gradient_check(lambda a, b: cosine_term(a, b) - 10.0 * exp_euclidean_term(a, b))
    assert not res.passed()
    assert verify.pair_gradient_check().passed()


def test_run_lists_every_check():
    buf = io.StringIO()
    assert verify.run(buf)
    lines = buf.getvalue().splitlines()
    for name in verify.CHECKS:
        assert any(ln.startswith(f"PASS {name} ") for ln in lines)
    assert lines[-1] == "all checks passed"


def test_run_reports_crash_as_failure():
    def boom():
        raise RuntimeError("kaput")

    buf = io.StringIO()
    assert not verify.run(buf, {"boom": boom, "fine": lambda: (True, "")})
    text = buf.getvalue()
    assert "FAIL boom" in text and "RuntimeError: kaput" in text and "PASS fine" in text


@pytest.mark.parametrize("kind", verify.ORACLE_KINDS)
def test_oracle_kind_within_tolerance(kind):
    rng = np.random.default_rng(3)
    assert max(verify.oracle_case(kind, rng) for _ in range(10)) <= verify.ORACLE_TOL


def test_gradcheck_floor_and_exclusion():
    res = GradCheck(np.array([0.0, 1.0, 2.0]), np.array([1e-9, 1.0, 0.0]), np.array([False, False, True]))
    # tiny absolute differences are judged against the 1e-6 floor
    np.testing.assert_allclose(res.rel_errors, [1e-3, 0.0])
    assert res.worst == pytest.approx(1e-3)
    assert res.fraction_within(1e-4) == 0.5


def test_gradcheck_relu_kink_is_excluded():
    x = Tensor(np.array([1e-7, 0.5, -0.3]), requires_grad=True)
    res = check_gradients(lambda: relu(x).sum(), [x])
    np.testing.assert_array_equal(res.excluded, [True, False, False])
    assert res.passed()


def _rows(n=3, m=2):
    rows = []
    for e in range(1, n + 1):
        row = {"epoch": float(e), "distance": 1.0 / e, "best_epoch": float(n)}
        for i in range(m):
            row[f"ce_{i}"] = 0.7 / e
            row[f"val_acc_{i}"] = 0.5 + 0.1 * e
        rows.append(row)
    return rows


def test_training_curves_png(tmp_path):
    path = plotting.training_curves(_rows(), tmp_path / "c.png")
    assert path.read_bytes().startswith(PNG)


def test_figures_are_reproducible(tmp_path):
    a = plotting.training_curves(_rows(), tmp_path / "a.png").read_bytes()
    b = plotting.training_curves(_rows(), tmp_path / "b.png").read_bytes()
    assert a == b


def test_parse_metrics_log(tmp_path):
    (tmp_path / "m.log").write_text("epoch=1 ce_0=0.5 best_epoch=1\n\nepoch=2 ce_0=0.25 best_epoch=2\n")
    rows = plotting.parse_metrics_log(tmp_path / "m.log")
    assert rows == [{"epoch": 1.0, "ce_0": 0.5, "best_epoch": 1.0}, {"epoch": 2.0, "ce_0": 0.25, "best_epoch": 2.0}]


def test_class_accuracy_png(tmp_path):
    rep = Report("soft_vote", "test", 4, 0.75, {"a": 1.0, "b": 0.5}, {"a": 2, "b": 2})
    assert plotting.class_accuracy(rep, tmp_path / "r.png").read_bytes().startswith(PNG)


def test_cam_panel_and_ramp(tmp_path, rng):
    maps = [HeatMap(rng.uniform(size=(4, 4)), i, 0, 1.0) for i in range(3)]
    assert plotting.cam_panel(rng.uniform(size=(8, 8, 1)), maps, tmp_path / "p.png", 0.4).read_bytes().startswith(PNG)
    assert plotting.ramp_strip(tmp_path / "ramp.png").read_bytes().startswith(PNG)


def test_figure_size():
    w, h = plotting.figure_size(2)
    assert w == pytest.approx(6.8) and h == pytest.approx(3.4 * 0.618034, rel=1e-5)
