"""Smoke test for the toolplan_py extension.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py [--toolplan target/release/toolplan]

With a toolplan binary the script also trains a tiny run and plans with it.
"""

import argparse
import json
import math
import shutil
import subprocess
import tempfile
from pathlib import Path

import toolplan_py as tp


def check_graph():
    g = tp.ToolGraph.generate(10, 30, seed=2)
    assert (g.num_tools, g.num_edges) == (10, 30)
    again = tp.ToolGraph.from_json(g.to_json())
    assert again.to_json() == g.to_json()
    paths = g.sample_paths(500, [0.2, 0.3, 0.5], seed=1)
    assert len(paths) == 500
    assert all(g.validate_trajectory(p) for p in paths)
    assert paths == g.sample_paths(500, [0.2, 0.3, 0.5], seed=1)
    for p in paths[:50]:
        assert g.edge_legality_rate(p) == 1.0
    try:
        tp.ToolGraph.from_json('{"tools": [], "edges": [["A", "B"]]}')
    except ValueError:
        pass
    else:
        raise AssertionError("bad graph accepted")
    return g


def check_metrics():
    assert tp.exact_match([0, 1], [0, 1]) == 1.0
    assert tp.acpl([0, 1, 2], [0, 1, 3]) == 2
    assert math.isclose(tp.tool_f1([1, 0], [2, 3, 0]), 0.4)
    assert math.isclose(tp.ned([0, 2, 1], [0, 1, 2]), 2 / 3)
    assert tp.ned([], [0]) == 1.0


def check_gradients():
    for name, err in tp.gradcheck(seed=0, coords=16):
        assert err < 1e-4, (name, err)


def check_planner(binary):
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)

        def run(*args):
            subprocess.run([binary, *args], check=True, capture_output=True)

        run("gen-graph", "--out", str(d / "g"), "--tools", "8", "--edges", "20", "--seed", "1")
        run("gen-data", "--graph", str(d / "g/graph.json"), "--out", str(d / "d"),
            "--set", "n_train=30", "--set", "n_val=4", "--set", "n_test=4")
        run("train", "--graph", str(d / "g/graph.json"), "--train", str(d / "d/train.jsonl"),
            "--out", str(d / "r"), "--set", "model.hidden_dim=16", "--set", "model.num_heads=2",
            "--set", "epochs.sft=2", "--set", "epochs.distill=1", "--set", "path_corpus_size=16")
        g = tp.ToolGraph.load(str(d / "g/graph.json"))
        planner = tp.Planner(g, str(d / "r"))
        query = json.loads((d / "d/test.jsonl").read_text().splitlines()[0])["query"]
        plan = planner.plan(query, mode="graph-masked")
        names = g.tool_names()
        ids = [names.index(n) for n in plan]
        assert len(plan) <= 10
        if len(ids) > 1:
            assert g.validate_trajectory(ids)
        print("plan:", plan)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--toolplan", default=shutil.which("toolplan"))
    args = ap.parse_args()
    check_graph()
    check_metrics()
    check_gradients()
    if args.toolplan:
        check_planner(args.toolplan)
    else:
        print("no toolplan binary; planner check skipped")
    print("ok")


if __name__ == "__main__":
    main()
