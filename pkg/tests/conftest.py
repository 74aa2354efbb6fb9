import numpy as np
import pytest

from kgpath.kg import load_graph


def write_edges(path, rows):
    path.write_text("".join(f"{h}\t{r}\t{t}\t{w}\n" for h, r, t, w in rows), encoding="utf-8")
    return path


def write_relations(path, names):
    path.write_text("\n".join(names) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def tiny_graph(tmp_path):
    """The three-line example graph: a-relatedto-b, b-isa-c, a-isa-c."""
    edges = write_edges(
        tmp_path / "edges.tsv",
        [("a", "relatedto", "b", 1.0), ("b", "isa", "c", 2.0), ("a", "isa", "c", 0.5)],
    )
    rels = write_relations(tmp_path / "relations.txt", ["relatedto", "isa"])
    return load_graph(edges, rels)


def random_graph(tmp_path, rng, n_entities=30, n_edges=120, relations=("r0", "r1", "r2")):
    """Random lowercase graph with dyadic weights (exact float sums)."""
    rows = []
    for i in range(n_entities - 1):  # chain keeps everything connected
        rows.append((f"n{i}", relations[int(rng.integers(len(relations)))], f"n{i+1}",
                     int(rng.integers(1, 17)) / 4))
    while len(rows) < n_edges:
        a, b = rng.integers(n_entities, size=2)
        if a == b:
            continue
        rows.append((f"n{a}", relations[int(rng.integers(len(relations)))], f"n{b}",
                     int(rng.integers(1, 17)) / 4))
    edges = write_edges(tmp_path / "rand_edges.tsv", rows)
    rels = write_relations(tmp_path / "rand_relations.txt", list(relations))
    return load_graph(edges, rels), rows


def finite_difference(fn, params, h=1e-5):
    """Central finite differences of a scalar function over numpy arrays.

    ``params`` are mutated in place during probing and restored afterwards;
    returns one gradient array per parameter.
    """
    grads = []
    for arr in params:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(grad)
    return grads


def relative_error(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if den == 0:
        return 0.0
    return num / den
