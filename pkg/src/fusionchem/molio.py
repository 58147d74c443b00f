"""Molecular structure I/O and rasterisation onto a fixed pixel grid.

Images are ``(height, width, 4)`` float32 arrays.  Row index follows +y and
column index follows +x, both measured from the molecule centroid, which is
placed on pixel ``(height // 2, width // 2)``.  Channel layout:

====  ==========================  =====================
ch    atom pixel                  bond pixel
====  ==========================  =====================
0     atomic number / 100         bond order / 4
1     heavy+H degree / 8          0
2     (formal charge + 4) / 8     0
3     1 (occupancy)               1 (occupancy)
====  ==========================  =====================
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EncodingRangeError, LoadError, OutOfBoundsError, ParseError, ValidationError

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}
ATOMIC_NUMBER["D"] = ATOMIC_NUMBER["T"] = 1

N_CHANNELS = 4
CHANNEL_SCHEME = "z-degree-charge-occupancy"

# V2000 bond type 4 is aromatic
_BOND_TYPES = {1: 1.0, 2: 2.0, 3: 3.0, 4: 1.5}
_BOND_CODES = {v: k for k, v in _BOND_TYPES.items()}
# V2000 atom-block charge code -> formal charge
_CHARGE_CODES = {0: 0, 1: 3, 2: 2, 3: 1, 4: 0, 5: -1, 6: -2, 7: -3}


@dataclass(frozen=True)
class Atom:
    element: str
    x: float
    y: float
    charge: int = 0


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: float = 1.0


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple
    bonds: tuple = ()
    name: str = ""
    properties: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "bonds", tuple(self.bonds))
        if not self.atoms:
            raise ValidationError(f"molecule {self.name!r} has no atoms")
        n = len(self.atoms)
        for bond in self.bonds:
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ValidationError(f"bond {bond} references a missing atom (molecule has {n})")
            if bond.a == bond.b:
                raise ValidationError(f"self-bond on atom {bond.a}")
            if bond.order not in _BOND_CODES:
                raise ValidationError(f"unsupported bond order {bond.order}")

    @property
    def coords(self):
        return np.array([(a.x, a.y) for a in self.atoms], dtype=float)

    def centroid(self):
        return self.coords.mean(axis=0)

    def degrees(self):
        deg = [0] * len(self.atoms)
        for bond in self.bonds:
            deg[bond.a] += 1
            deg[bond.b] += 1
        return deg

    def with_coords(self, coords):
        atoms = tuple(replace(a, x=float(x), y=float(y)) for a, (x, y) in zip(self.atoms, coords))
        return MolecularGraph(atoms, self.bonds, self.name, dict(self.properties))


# ---------------------------------------------------------------------------
# V2000 parsing


def _int_field(text, start, stop, default=None):
    chunk = text[start:stop].strip()
    if not chunk:
        if default is None:
            raise ValueError(f"empty field at columns {start}-{stop}")
        return default
    return int(chunk)


def _parse_atom(line):
    try:
        x, y = float(line[0:10]), float(line[10:20])
        float(line[20:30])
        symbol = line[31:34].strip()
        charge_code = _int_field(line, 36, 39, default=0)
        if not symbol:
            raise ValueError("missing symbol")
    except ValueError:
        # tolerate whitespace-separated atom lines from sloppy writers
        parts = line.split()
        if len(parts) < 4:
            raise
        x, y = float(parts[0]), float(parts[1])
        float(parts[2])
        symbol = parts[3]
        charge_code = int(parts[5]) if len(parts) > 5 else 0
    if charge_code not in _CHARGE_CODES:
        raise ValueError(f"bad charge code {charge_code}")
    return symbol, x, y, _CHARGE_CODES[charge_code]


def _parse_bond(line):
    try:
        a, b, kind = _int_field(line, 0, 3), _int_field(line, 3, 6), _int_field(line, 6, 9)
    except ValueError:
        parts = line.split()
        if len(parts) < 3:
            raise
        a, b, kind = int(parts[0]), int(parts[1]), int(parts[2])
    if kind not in _BOND_TYPES:
        raise ValueError(f"unsupported bond type {kind}")
    return a - 1, b - 1, _BOND_TYPES[kind]


def _parse_record(lines, first_line, record):
    """``lines`` excludes the ``$$$$`` terminator; ``first_line`` is the
    1-based file line number of ``lines[0]``."""
    if len(lines) < 4:
        raise ParseError("record shorter than header + counts line", record, first_line + len(lines))
    name = lines[0].strip()
    counts = lines[3]
    try:
        n_atoms, n_bonds = _int_field(counts, 0, 3), _int_field(counts, 3, 6)
    except ValueError:
        parts = counts.split()
        try:
            n_atoms, n_bonds = int(parts[0]), int(parts[1])
        except (IndexError, ValueError):
            raise ParseError(f"malformed counts line {counts!r}", record, first_line + 3) from None
    if "V3000" in counts:
        raise ParseError("V3000 records are not supported", record, first_line + 3)
    end = 4 + n_atoms + n_bonds
    if len(lines) < end:
        raise ParseError(f"truncated block: expected {n_atoms} atoms and {n_bonds} bonds",
                         record, first_line + len(lines))
    symbols, xy, charges = [], [], []
    for i in range(n_atoms):
        lineno = first_line + 4 + i
        try:
            sym, x, y, q = _parse_atom(lines[4 + i])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad atom line: {exc}", record, lineno) from None
        symbols.append(sym)
        xy.append((x, y))
        charges.append(q)
    bonds = []
    for i in range(n_bonds):
        lineno = first_line + 4 + n_atoms + i
        try:
            a, b, order = _parse_bond(lines[4 + n_atoms + i])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad bond line: {exc}", record, lineno) from None
        if not (0 <= a < n_atoms and 0 <= b < n_atoms) or a == b:
            raise ParseError(f"bond references atoms {a + 1}-{b + 1}", record, lineno)
        bonds.append(Bond(a, b, order))

    properties = {}
    i = end
    seen_chg = False
    while i < len(lines):
        line = lines[i]
        if line.startswith("M  END"):
            i += 1
            break
        if line.startswith("M  CHG"):
            if not seen_chg:
                # any CHG line supersedes atom-block charges
                charges = [0] * n_atoms
                seen_chg = True
            parts = line[6:].split()
            try:
                pairs = [int(v) for v in parts[1:]]
                for atom_idx, value in zip(pairs[::2], pairs[1::2]):
                    charges[atom_idx - 1] = value
            except (ValueError, IndexError):
                raise ParseError(f"bad charge property {line!r}", record, first_line + i) from None
        i += 1
    key = None
    values = []
    for line in lines[i:]:
        if line.startswith(">"):
            lt, gt = line.find("<"), line.rfind(">")
            key = line[lt + 1:gt] if 0 <= lt < gt else line[1:].strip()
            values = []
            properties[key] = ""
        elif key is not None:
            if line.strip() == "":
                key = None
            else:
                values.append(line.rstrip())
                properties[key] = "\n".join(values)

    atoms = [Atom(s, x, y, q) for s, (x, y), q in zip(symbols, xy, charges)]
    if not atoms:
        raise ValidationError(f"record {record}: molecule has zero atoms")
    return MolecularGraph(atoms, bonds, name, properties)


def split_records(data):
    """Yield ``(record index, lines, first line number)`` per record."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8", errors="replace")
    current, start, index = [], 1, 0
    for lineno, line in enumerate(data.splitlines(), start=1):
        if line.strip() == "$$$$":
            yield index, current, start
            index += 1
            current, start = [], lineno + 1
        else:
            current.append(line)
    if any(line.strip() for line in current):
        yield index, current, start


def parse_record(lines, first_line=1, record=0):
    return _parse_record(lines, first_line, record)


def parse_structure_file(data):
    """Parse a multi-record V2000 file (bytes or str) into molecules, in order."""
    return [_parse_record(lines, start, index) for index, lines, start in split_records(data)]


def read_structure_file(path):
    with open(path, "rb") as fp:
        return parse_structure_file(fp.read())


def write_structure_file(mols):
    """Serialise molecules as V2000 records with their properties."""
    out = []
    for mol in mols:
        out.append(mol.name)
        out.append("  fusionchem")
        out.append("")
        out.append(f"{len(mol.atoms):3d}{len(mol.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
        for atom in mol.atoms:
            out.append(f"{atom.x:10.4f}{atom.y:10.4f}{0.0:10.4f} {atom.element:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
        for bond in mol.bonds:
            out.append(f"{bond.a + 1:3d}{bond.b + 1:3d}{_BOND_CODES[bond.order]:3d}  0")
        charged = [(i + 1, a.charge) for i, a in enumerate(mol.atoms) if a.charge]
        for k in range(0, len(charged), 8):
            chunk = charged[k:k + 8]
            out.append(f"M  CHG{len(chunk):3d}" + "".join(f" {i:3d} {q:3d}" for i, q in chunk))
        out.append("M  END")
        for key, value in mol.properties.items():
            out.append(f">  <{key}>")
            out.append(str(value))
            out.append("")
        out.append("$$$$")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# rasterisation


@dataclass(frozen=True)
class RasterSpec:
    width_px: int = 80
    height_px: int = 80
    resolution: float = 0.5
    channels: str = CHANNEL_SCHEME

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ValidationError("raster dimensions must be positive")
        if not self.resolution > 0:
            raise ValidationError("resolution must be positive")
        if self.channels != CHANNEL_SCHEME:
            raise ValidationError(f"unknown channel scheme {self.channels!r}")

    @property
    def field_of_view(self):
        return (self.width_px * self.resolution, self.height_px * self.resolution)

    @property
    def shape(self):
        return (self.height_px, self.width_px, N_CHANNELS)

    def to_dict(self):
        return {"width_px": self.width_px, "height_px": self.height_px,
                "resolution": self.resolution, "channels": self.channels}


@dataclass
class PixelGeometry:
    """Pixel positions of atoms and bond lines (bond endpoints excluded)."""

    atom_pixels: list
    bond_pixels: list
    collisions: list


@dataclass
class ChemImage:
    pixels: np.ndarray
    sample_id: str = ""
    warnings: list = field(default_factory=list)


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def _scaled(d, t, n):
    # round(d * t / n), ties away from zero, in integers
    q = (2 * abs(d) * t + n) // (2 * n)
    return q if d >= 0 else -q


def line_pixels(p0, p1):
    """Integer Bresenham line from ``p0`` to ``p1``, endpoints excluded.

    Minor-axis ties round away from the start pixel, which makes the line
    commute with quarter-turn rotations of the grid.
    """
    (r0, c0), (r1, c1) = p0, p1
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    return [(r0 + _scaled(dr, t, n), c0 + _scaled(dc, t, n)) for t in range(1, n)]


def pixel_geometry(mol, spec):
    coords = mol.coords
    rel = (coords - coords.mean(axis=0)) / spec.resolution
    rows = [_round_half_up(spec.height_px // 2 + dy) for dy in rel[:, 1]]
    cols = [_round_half_up(spec.width_px // 2 + dx) for dx in rel[:, 0]]
    if (min(rows) < 0 or max(rows) >= spec.height_px or min(cols) < 0 or max(cols) >= spec.width_px):
        extent = tuple(float(v) for v in coords.max(axis=0) - coords.min(axis=0))
        fov = spec.field_of_view
        raise OutOfBoundsError(
            f"molecule {mol.name!r} extent {extent[0]:.2f} x {extent[1]:.2f} A does not fit the "
            f"{fov[0]:g} x {fov[1]:g} A field of view", extent=extent)
    atom_pixels = list(zip(rows, cols))
    seen = {}
    collisions = []
    for i, px in enumerate(atom_pixels):
        if px in seen:
            collisions.append((seen[px], i, px))
        seen[px] = i
    bond_pixels = [line_pixels(atom_pixels[b.a], atom_pixels[b.b]) for b in mol.bonds]
    return PixelGeometry(atom_pixels, bond_pixels, collisions)


def encode_channels(mol, geometry):
    """Channel values for every lit pixel as ``{(row, col): 4-tuple}``.

    Bonds are written first, in bond order, then atoms, so atoms win any
    conflict and later writers win among equals.
    """
    degrees = mol.degrees()
    values = {}
    for bond, pixels in zip(mol.bonds, geometry.bond_pixels):
        for px in pixels:
            values[px] = (bond.order / 4.0, 0.0, 0.0, 1.0)
    for atom, degree, px in zip(mol.atoms, degrees, geometry.atom_pixels):
        z = ATOMIC_NUMBER.get(atom.element)
        if z is None:
            raise EncodingRangeError(f"unknown element symbol {atom.element!r}")
        if z > 100:
            raise EncodingRangeError(f"atomic number {z} ({atom.element}) exceeds 100")
        if abs(atom.charge) > 4:
            raise EncodingRangeError(f"formal charge {atom.charge} outside [-4, 4]")
        if degree > 8:
            raise EncodingRangeError(f"atom degree {degree} exceeds 8")
        values[px] = (z / 100.0, degree / 8.0, (atom.charge + 4) / 8.0, 1.0)
    return values


def rasterize(mol, spec=RasterSpec(), sample_id=None):
    geometry = pixel_geometry(mol, spec)
    pixels = np.zeros(spec.shape, dtype=np.float32)
    for (r, c), vals in encode_channels(mol, geometry).items():
        pixels[r, c] = vals
    warnings = [f"atoms {i} and {j} share pixel {px}" for i, j, px in geometry.collisions]
    return ChemImage(pixels, mol.name if sample_id is None else sample_id, warnings)


def rotate_molecule(mol, angle_degrees):
    """Rotate counter-clockwise about the centroid; bonds and metadata kept."""
    angle = float(angle_degrees)
    if not math.isfinite(angle):
        raise ValidationError(f"rotation angle must be finite, got {angle_degrees}")
    quarter = angle / 90.0
    if quarter == int(quarter):
        c, s = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(quarter) % 4]
    else:
        theta = math.radians(angle)
        c, s = math.cos(theta), math.sin(theta)
    coords = mol.coords
    center = coords.mean(axis=0)
    rel = coords - center
    rotated = np.column_stack((c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1])) + center
    return mol.with_coords(rotated)


# ---------------------------------------------------------------------------
# dataset archive
#
# layout (little-endian):
#   b"BFDS" | u32 version | u32 n | n bytes UTF-8 JSON header
#   then ``count`` blocks of height*width*channels float32 pixels, row-major
# header: {"count", "raster": RasterSpec dict, "samples": [{"id", "label", "source"}]}

ARCHIVE_MAGIC = b"BFDS"
ARCHIVE_VERSION = 1


@dataclass
class ImageArchive:
    spec: RasterSpec
    ids: list
    images: np.ndarray
    labels: list
    sources: list

    def __len__(self):
        return len(self.ids)


def write_archive(fp, archive):
    header = {
        "count": len(archive.ids),
        "raster": archive.spec.to_dict(),
        "samples": [
            {"id": i, "label": lab, "source": src}
            for i, lab, src in zip(archive.ids, archive.labels, archive.sources)
        ],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    fp.write(ARCHIVE_MAGIC)
    fp.write(struct.pack("<II", ARCHIVE_VERSION, len(text)))
    fp.write(text)
    fp.write(np.ascontiguousarray(archive.images, dtype="<f4").tobytes())


def read_archive(fp):
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, "rb") as fh:
            return read_archive(fh)
    if fp.read(4) != ARCHIVE_MAGIC:
        raise LoadError("not a dataset archive (bad magic)")
    version, n = struct.unpack("<II", fp.read(8))
    if version != ARCHIVE_VERSION:
        raise LoadError(f"unsupported archive version {version}")
    header = json.loads(fp.read(n).decode("utf-8"))
    spec = RasterSpec(**header["raster"])
    count = header["count"]
    size = count * spec.height_px * spec.width_px * N_CHANNELS
    raw = fp.read(4 * size)
    if len(raw) != 4 * size:
        raise LoadError("truncated archive pixel data")
    images = np.frombuffer(raw, dtype="<f4").reshape((count,) + spec.shape).astype(np.float32)
    samples = header["samples"]
    return ImageArchive(spec, [s["id"] for s in samples], images,
                        [s.get("label") for s in samples], [s.get("source") for s in samples])


def archive_bytes(archive):
    buf = io.BytesIO()
    write_archive(buf, archive)
    return buf.getvalue()
