"""Synthetic labelled corpora for desk-scale experiments.

Molecules are random 2-D trees on a hexagonal direction set.  The label
mixes three signals:

* a triple-bond motif, visible in images but absent from the descriptors;
* a latent property exposed only as a descriptor column;
* the heteroatom fraction, visible to both modalities.

So descriptor-only and image-only models each miss part of the signal.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .descriptors import DescriptorTable, table_to_csv
from .molio import Atom, Bond, MolecularGraph, write_structure_file

BOND_LENGTH = 1.45
MIN_SEPARATION = 1.2
MAX_VALENCE = {"C": 4, "N": 3, "O": 2}
DIRECTIONS = [(math.cos(math.radians(a)), math.sin(math.radians(a))) for a in range(0, 360, 60)]

DESCRIPTOR_NAMES = (
    "n_atoms", "n_C", "n_N", "n_O", "n_bonds", "n_double", "n_branch",
    "radius_gyration", "max_extent", "latent_property", "constant",
) + tuple(f"noise_{i:02d}" for i in range(8))

PRETRAIN_TARGETS = ("n_atoms", "n_C", "n_N", "n_O", "n_single", "n_double", "n_triple")


@dataclass(eq=False)
class SyntheticCorpus:
    molecules: list
    labels: np.ndarray
    motif: np.ndarray
    descriptors: DescriptorTable

    @property
    def ids(self):
        return tuple(m.name for m in self.molecules)


def _valence(mol_atoms, bonds, i):
    return sum(b.order for b in bonds if i in (b.a, b.b))


def random_molecule(rng, name, n_atoms, motif, max_radius=7.0, motif_bonds=1):
    """Grow one tree; ``motif`` forces ``motif_bonds`` C#C bonds, else none."""
    while True:
        elems = rng.choice(["C", "N", "O"], size=n_atoms, p=[0.7, 0.15, 0.15]).tolist()
        elems[0] = "C"
        coords = [(0.0, 0.0)]
        bonds = []
        ok = True
        for i in range(1, n_atoms):
            placed = False
            for _ in range(30):
                parent = int(rng.integers(0, i))
                if _valence(None, bonds, parent) + 1 > MAX_VALENCE[elems[parent]] - (elems[parent] == "C"):
                    continue
                dx, dy = DIRECTIONS[int(rng.integers(0, 6))]
                x, y = coords[parent][0] + BOND_LENGTH * dx, coords[parent][1] + BOND_LENGTH * dy
                if min(math.hypot(x - cx, y - cy) for cx, cy in coords) < MIN_SEPARATION:
                    continue
                coords.append((x, y))
                bonds.append(Bond(parent, i, 1.0))
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        xy = np.array(coords)
        if np.max(np.hypot(*(xy - xy.mean(axis=0)).T)) > max_radius:
            continue
        degree = [0] * n_atoms
        for b in bonds:
            degree[b.a] += 1
            degree[b.b] += 1
        triple_ok = [k for k, b in enumerate(bonds)
                     if elems[b.a] == "C" and elems[b.b] == "C" and degree[b.a] <= 2 and degree[b.b] <= 2]
        if motif:
            placed = 0
            for k in rng.permutation(len(triple_ok)):
                b = bonds[triple_ok[k]]
                if _valence(None, bonds, b.a) + 2 <= 4 and _valence(None, bonds, b.b) + 2 <= 4:
                    bonds[triple_ok[k]] = Bond(b.a, b.b, 3.0)
                    placed += 1
                    if placed == motif_bonds:
                        break
            if placed < motif_bonds:
                continue
        for k, b in enumerate(bonds):
            if b.order != 1.0 or rng.random() > 0.15:
                continue
            if all(_valence(None, bonds, j) + 1 <= MAX_VALENCE[elems[j]] for j in (b.a, b.b)):
                bonds[k] = Bond(b.a, b.b, 2.0)
        atoms = [Atom(e, float(x), float(y), 0) for e, (x, y) in zip(elems, coords)]
        return MolecularGraph(atoms, bonds, name)


def molecule_counts(mol):
    elems = [a.element for a in mol.atoms]
    orders = [b.order for b in mol.bonds]
    degree = mol.degrees()
    xy = mol.coords
    rel = xy - xy.mean(axis=0)
    return {
        "n_atoms": len(elems),
        "n_C": elems.count("C"),
        "n_N": elems.count("N"),
        "n_O": elems.count("O"),
        "n_bonds": len(orders),
        "n_single": orders.count(1.0),
        "n_double": orders.count(2.0),
        "n_triple": orders.count(3.0),
        "n_branch": sum(d >= 3 for d in degree),
        "radius_gyration": float(np.sqrt(np.mean(np.sum(rel * rel, axis=1)))),
        "max_extent": float(np.max(xy.max(axis=0) - xy.min(axis=0))),
    }


def make_corpus(n, seed=0, motif_rate=0.5, missing_rate=0.01, size_range=(6, 12), prefix="mol",
                motif_weight=2.5, latent_weight=1.2, hetero_weight=0.8, noise=0.3,
                max_radius=7.0, motif_bonds=1):
    rng = np.random.default_rng(seed)
    motif = rng.random(n) < motif_rate
    mols = [random_molecule(rng, f"{prefix}{i:05d}", int(rng.integers(size_range[0], size_range[1] + 1)),
                            bool(motif[i]), max_radius, motif_bonds) for i in range(n)]
    counts = [molecule_counts(m) for m in mols]
    latent = rng.normal(size=n)
    hetero = np.array([(c["n_N"] + c["n_O"]) / c["n_atoms"] for c in counts])
    hetero = (hetero - hetero.mean()) / hetero.std()
    score = (motif_weight * (motif - 0.5) + latent_weight * latent + hetero_weight * hetero
             + noise * rng.normal(size=n))
    labels = (score > np.quantile(score, 0.65)).astype(float)
    rows = []
    for i, c in enumerate(counts):
        row = [c[k] for k in DESCRIPTOR_NAMES[:9]]
        row += [latent[i] + 0.1 * rng.normal(), 1.0]
        row += rng.normal(size=8).tolist()
        rows.append(row)
    values = np.array(rows, dtype=float)
    values[rng.random(values.shape) < missing_rate] = np.nan
    table = DescriptorTable(tuple(m.name for m in mols), DESCRIPTOR_NAMES, values)
    return SyntheticCorpus(mols, labels, motif.astype(int), table)


def pretraining_targets(molecules, names=PRETRAIN_TARGETS):
    """Standardised structure-computable counts (no measured labels)."""
    raw = np.array([[molecule_counts(m)[k] for k in names] for m in molecules], dtype=float)
    std = raw.std(axis=0)
    keep = std > 1e-12
    return (raw[:, keep] - raw[:, keep].mean(axis=0)) / std[keep]


def write_corpus(corpus, directory, ids=None):
    """Write ``structures.sdf``, ``descriptors.csv`` and ``labels.csv``.

    Labels are written both as a CSV and as a ``label`` data item per
    record.  Returns a dict of the three paths.
    """
    os.makedirs(directory, exist_ok=True)
    index = {m.name: i for i, m in enumerate(corpus.molecules)}
    ids = list(corpus.ids if ids is None else ids)
    rows = [index[i] for i in ids]
    mols = [replace(corpus.molecules[i], properties={"label": "RB" if corpus.labels[i] else "NRB"})
            for i in rows]
    paths = {name: os.path.join(directory, name)
             for name in ("structures.sdf", "descriptors.csv", "labels.csv")}
    with open(paths["structures.sdf"], "w", newline="\n") as fp:
        fp.write(write_structure_file(mols))
    with open(paths["descriptors.csv"], "w", newline="\n") as fp:
        fp.write(table_to_csv(corpus.descriptors.rows(ids)))
    with open(paths["labels.csv"], "w", newline="\n") as fp:
        fp.write("id,label\n")
        fp.writelines(f"{i},{int(corpus.labels[r])}\n" for i, r in zip(ids, rows))
    return {k.split(".")[0]: v for k, v in paths.items()}
