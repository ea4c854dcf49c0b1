import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridshed.netmodel import (
    CaseFormatError,
    CaseValidationError,
    InvalidDisturbanceError,
    apply_disturbance,
    ieee57_path,
    incidence_matrix,
    load_case,
    network_to_json,
    parse_matpower_case,
    sever,
)

TWO_BUS = {
    "buses": [
        {"id": 1, "kind": "generator", "p0": 1.0, "pmin": 0.0, "pmax": 2.0},
        {"id": 2, "kind": "load", "p0": -1.0, "pmin": -1.0, "pmax": 0.0},
    ],
    "branches": [{"id": 1, "from": 1, "to": 2, "y": 1.0, "c": 2.0}],
}


def test_two_bus_json():
    net = load_case(json.dumps(TWO_BUS))
    assert (net.n, net.n_branches) == (2, 1)
    np.testing.assert_array_equal(net.incidence, [[1.0, -1.0]])
    assert net.thresholds[0] == 2.0


def test_json_roundtrip():
    net = load_case(json.dumps(TWO_BUS))
    again = load_case(json.dumps(network_to_json(net)))
    assert again == net


def test_json_default_threshold():
    doc = json.loads(json.dumps(TWO_BUS))
    del doc["branches"][0]["c"]
    assert load_case(json.dumps(doc), default_threshold=0.7).thresholds[0] == 0.7


def test_file_object_and_bytes():
    text = json.dumps(TWO_BUS)
    assert load_case(io.StringIO(text)) == load_case(text.encode())


def test_ieee57_counts(net57):
    assert net57.n == 57
    assert net57.n_branches == 80
    assert abs(net57.p0.sum()) <= 1e-6
    assert int(net57.is_generator.sum()) == 7
    br = net57.branches[net57.branch_position(10)]
    assert (br.from_bus, br.to_bus) == (9, 11)


def test_ieee57_deterministic():
    data = ieee57_path().read_bytes()
    assert load_case(data, fmt="matpower") == load_case(data, fmt="matpower")


def test_ieee57_incidence_kills_constants(net57):
    np.testing.assert_allclose(net57.incidence @ np.ones(net57.n), 0.0)


def test_unknown_bus_names_row():
    text = ieee57_path().read_text().replace("\t9\t11\t", "\t9\t99\t", 1)
    with pytest.raises(CaseValidationError, match="branch row 10.*99"):
        parse_matpower_case(text)


def test_imbalanced_case_rejected_without_rebalancing():
    with pytest.raises(CaseValidationError, match="balance"):
        parse_matpower_case(ieee57_path().read_text(), balance="none")


def test_missing_table():
    with pytest.raises(CaseFormatError, match="mpc.branch"):
        parse_matpower_case("mpc.bus = [1 3 0];\nmpc.gen = [1 0 0 0 0 0 0 1 1];")


def test_bad_json():
    with pytest.raises(CaseFormatError):
        load_case("{not json")
    doc = json.loads(json.dumps(TWO_BUS))
    del doc["buses"][0]["p0"]
    with pytest.raises(CaseFormatError, match=r"buses\[0\]"):
        load_case(json.dumps(doc))


@pytest.mark.parametrize("field,value,match", [
    ("y", -1.0, "admittance"),
    ("c", 0.0, "threshold"),
    ("to", 1, "both"),
])
def test_branch_validation(field, value, match):
    doc = json.loads(json.dumps(TWO_BUS))
    doc["branches"][0][field] = value
    with pytest.raises(CaseValidationError, match=match):
        load_case(json.dumps(doc))


def test_unbalanced_json():
    doc = json.loads(json.dumps(TWO_BUS))
    doc["buses"][1]["p0"] = -0.5
    with pytest.raises(CaseValidationError, match="balance"):
        load_case(json.dumps(doc))


def test_triangle_incidence(triangle):
    A = incidence_matrix(triangle)
    np.testing.assert_array_equal(A.sum(axis=1), 0)
    np.testing.assert_array_equal(A.sum(axis=0), [2, -2, 0])


def test_disturbance_identity(net57):
    np.testing.assert_array_equal(apply_disturbance(net57, np.zeros(80)), net57.admittance)


def test_sever_branch_10(net57):
    Y1 = apply_disturbance(net57, sever(net57, [10]))
    assert np.count_nonzero(Y1 == 0) == 1
    assert Y1[net57.branch_position(10)] == 0


def test_negative_admittance_rejected(two_bus):
    with pytest.raises(InvalidDisturbanceError, match="branch ids \\[1\\]"):
        apply_disturbance(two_bus, [-1.5])


def test_threshold_overrides(net57):
    net = net57.with_thresholds(1.0, {10: 0.5})
    assert net.thresholds[net.branch_position(10)] == 0.5
    with pytest.raises(KeyError):
        net57.with_thresholds(1.0, {999: 1.0})


@given(st.lists(st.floats(0.0, 1.0), min_size=80, max_size=80))
def test_disturbance_stays_nonnegative(fracs):
    from gridshed.netmodel import ieee57
    net = ieee57()
    delta = -np.asarray(fracs) * net.admittance
    Y1 = apply_disturbance(net, delta)
    assert np.all(Y1 >= 0)
    np.testing.assert_allclose(Y1, net.admittance + delta, atol=1e-12)
