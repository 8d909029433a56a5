from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memplan.graph import Graph, load_graph

MB = 1 << 20


def diamond_doc() -> dict:
    """Fork-join graph whose two orders peak at 120MB and 90MB.

    A emits a 60MB tensor for C and a 20MB tensor for B; B emits 40MB and C
    emits 10MB, both joined by D. Definition order [A,B,C,D] holds both large
    tensors at once.
    """
    return {
        "ops": [
            {"id": 0, "name": "A", "kind": "forward", "inputs": [], "outputs": [0, 1]},
            {"id": 1, "name": "B", "kind": "forward", "inputs": [1], "outputs": [2]},
            {"id": 2, "name": "C", "kind": "forward", "inputs": [0], "outputs": [3]},
            {"id": 3, "name": "D", "kind": "forward", "inputs": [2, 3], "outputs": []},
        ],
        "tensors": [
            {"id": 0, "size_bytes": 60 * MB},
            {"id": 1, "size_bytes": 20 * MB},
            {"id": 2, "size_bytes": 40 * MB},
            {"id": 3, "size_bytes": 10 * MB},
        ],
    }


@pytest.fixture
def diamond() -> Graph:
    return load_graph(diamond_doc())


def chain_graph(k: int, size: int = MB) -> Graph:
    """k ops in a line, each feeding one tensor to the next."""
    ops = []
    tensors = []
    for i in range(k):
        inputs = [i - 1] if i > 0 else []
        outputs = [i] if i < k - 1 else []
        ops.append({"id": i, "name": f"n{i}", "kind": "forward", "inputs": inputs, "outputs": outputs})
        if i < k - 1:
            tensors.append({"id": i, "size_bytes": size})
    return load_graph({"ops": ops, "tensors": tensors})
