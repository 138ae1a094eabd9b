"""Scenario tree and market model construction, validation, serialization."""

import json

import numpy as np
import pytest

from tcdl.errors import MarketError
from tcdl.market import (
    binomial_market,
    build_market,
    build_tree,
    load_market,
    market_to_dict,
    save_market,
    single_node_market,
    tree_to_spec,
    validate_market,
)


def binomial_spec():
    return {
        "nodes": [
            {"id": "root", "parent": None, "time": 0},
            {"id": "up", "parent": "root", "time": 1},
            {"id": "down", "parent": "root", "time": 1},
        ],
        "probabilities": {"up": 0.5, "down": 0.5},
        "prices": {"root": 4.0, "up": 8.0, "down": 2.0},
        "lambda": 0.1,
        "endowment": {"up": 0.0, "down": 0.0},
    }


def test_tree_structure():
    tree = build_tree(binomial_spec())
    assert tree.n_nodes == 3
    assert tree.horizon == 1
    # nodes sort by (time, id): root, then down before up
    assert tree.node_ids == ("root", "down", "up")
    assert tree.parent[0] == -1
    assert set(tree.children[0]) == {1, 2}
    assert tree.leaves == (1, 2)
    assert tree.is_leaf(1) and tree.is_leaf(2)
    assert not tree.is_leaf(0)
    assert tree.path(2) == [0, 2]


def test_leaf_probabilities_chain_rule():
    spec = binomial_spec()
    spec["probabilities"] = {"up": 0.25, "down": 0.75}
    tree = build_tree(spec)
    p = tree.leaf_prob()
    assert np.isclose(p.sum(), 1.0)
    assert tree.node_prob[tree.index_of("up")] == pytest.approx(0.25)
    assert tree.node_prob[tree.index_of("down")] == pytest.approx(0.75)
    assert tree.node_prob[tree.root] == pytest.approx(1.0)


def test_tree_spec_round_trip():
    tree = build_tree(binomial_spec())
    again = build_tree(tree_to_spec(tree))
    assert again == tree


def test_duplicate_node_id_rejected():
    spec = binomial_spec()
    spec["nodes"].append({"id": "up", "parent": "root", "time": 1})
    with pytest.raises(MarketError):
        build_tree(spec)


def test_orphan_parent_rejected():
    spec = binomial_spec()
    spec["nodes"][1]["parent"] = "ghost"
    with pytest.raises(MarketError):
        build_tree(spec)


def test_nonpositive_probability_rejected():
    spec = binomial_spec()
    spec["probabilities"]["up"] = 0.0
    spec["probabilities"]["down"] = 1.0
    with pytest.raises(MarketError):
        build_tree(spec)


def test_sibling_probabilities_must_sum_to_one():
    spec = binomial_spec()
    spec["probabilities"] = {"up": 0.5, "down": 0.4}
    with pytest.raises(MarketError):
        build_tree(spec)


def test_market_validation_happy_path():
    model = build_market(binomial_spec())
    report = validate_market(model)
    assert report.ok
    assert report.violations == ()
    assert report.rho == 0.0


def test_market_rho_is_endowment_bound():
    spec = binomial_spec()
    spec["endowment"] = {"up": 0.25, "down": -0.5}
    model = build_market(spec)
    assert validate_market(model).rho == pytest.approx(0.5)


def test_negative_price_rejected():
    spec = binomial_spec()
    spec["prices"]["up"] = -8.0
    with pytest.raises(MarketError):
        build_market(spec)


def test_lambda_out_of_range_rejected():
    spec = binomial_spec()
    for bad in (-0.1, 1.0, 1.5):
        spec["lambda"] = bad
        with pytest.raises(MarketError):
            build_market(spec)


def test_endowment_keyed_by_leaf_ids_only():
    # non-leaf endowment keys are ignored; only terminal payments enter
    spec = binomial_spec()
    spec["endowment"] = {"root": 1.0, "up": 0.25, "down": -0.5}
    model = build_market(spec)
    assert model.rho == pytest.approx(0.5)
    assert np.allclose(model.endowment_vector(), [-0.5, 0.25])


def test_market_json_round_trip(tmp_path):
    spec = binomial_spec()
    spec["endowment"] = {"up": 0.25, "down": -0.5}
    model = build_market(spec)
    path = tmp_path / "market.json"
    save_market(model, str(path))
    again = load_market(str(path))
    assert market_to_dict(again) == market_to_dict(model)
    # the file is plain JSON
    with open(path) as fh:
        raw = json.load(fh)
    assert raw["lambda"] == 0.1


def test_binomial_helper_matches_spec():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1, endowment=(0.25, -0.5))
    built = build_market({**binomial_spec(), "endowment": {"up": 0.25, "down": -0.5}})
    assert market_to_dict(model) == market_to_dict(built)


def test_single_node_market():
    model = single_node_market(price=2.0, endowment=0.5)
    assert model.tree.n_nodes == 1
    assert model.tree.leaves == (0,)
    assert model.endowment_vector()[0] == 0.5
    assert validate_market(model).ok


def test_bid_below_ask():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1)
    ask = model.ask()
    bid = model.bid()
    assert np.all(bid <= ask)
    assert np.allclose(bid, 0.9 * ask)
