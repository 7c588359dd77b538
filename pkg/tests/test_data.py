import numpy as np
import pytest

from abconformer.core import ChainRole, DataError
from abconformer.data import (
    AtomRecord,
    ComplexRecord,
    attach_clusters,
    build_folds,
    encode_record,
    label_interfaces,
    load_clusters,
    load_folds,
    load_manifest,
    parse_structure,
    record_from_json,
    record_to_json,
    residue_patch,
    resolve_antibody_chains,
    write_folds,
    write_manifest,
)


def atom_line(serial, name, resname, chain, resseq, x, y, z, element, altloc=" ", icode=" "):
    return (
        f"ATOM  {serial:5d} {name:<4s}{altloc}{resname:<3s} {chain}{resseq:4d}{icode}   "
        f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {element:>2s}"
    )


def write_structure(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def make_atom(chain, ordinal, x, y, z, element="C", name="CA", resname="ALA"):
    return AtomRecord(chain, ordinal, resname, name, element, x, y, z)


class TestParseStructure:
    def test_two_chains_three_residues(self, tmp_path):
        lines = []
        serial = 1
        for chain in "AB":
            for res in range(3):
                lines.append(atom_line(serial, "CA", "ALA", chain, res + 1, res * 4.0, 0, 0, "C"))
                serial += 1
        chains = parse_structure(write_structure(tmp_path / "s.pdb", lines))
        assert sorted(chains) == ["A", "B"]
        assert [a.res_ordinal for a in chains["A"]] == [0, 1, 2]

    def test_hydrogen_parsed_and_flagged(self, tmp_path):
        lines = [
            atom_line(1, "CA", "ALA", "A", 1, 0, 0, 0, "C"),
            atom_line(2, "H", "ALA", "A", 1, 0.5, 0, 0, "H"),
        ]
        chains = parse_structure(write_structure(tmp_path / "s.pdb", lines))
        elements = [a.element for a in chains["A"]]
        assert elements == ["C", "H"]
        assert [a.is_heavy for a in chains["A"]] == [True, False]

    def test_truncated_line_reports_number(self, tmp_path):
        lines = [
            atom_line(1, "CA", "ALA", "A", 1, 0, 0, 0, "C"),
            "ATOM      2  CA ALA A   2",
        ]
        with pytest.raises(DataError, match="line 2"):
            parse_structure(write_structure(tmp_path / "s.pdb", lines))

    def test_altloc_duplicates_collapse_to_first(self, tmp_path):
        lines = [
            atom_line(1, "CA", "ALA", "A", 1, 1.0, 0, 0, "C", altloc="A"),
            atom_line(2, "CA", "ALA", "A", 1, 9.0, 0, 0, "C", altloc="B"),
        ]
        chains = parse_structure(write_structure(tmp_path / "s.pdb", lines))
        assert len(chains["A"]) == 1
        assert chains["A"][0].x == 1.0

    def test_non_atom_lines_skipped(self, tmp_path):
        lines = [
            "HEADER    something",
            atom_line(1, "CA", "ALA", "A", 1, 0, 0, 0, "C"),
            "TER",
            "HETATM  99  O   HOH A 200       0.000   0.000   0.000           O",
        ]
        chains = parse_structure(write_structure(tmp_path / "s.pdb", lines))
        assert len(chains["A"]) == 1

    def test_missing_element_rejected(self, tmp_path):
        line = atom_line(1, "CA", "ALA", "A", 1, 0, 0, 0, "C")[:70]
        with pytest.raises(DataError, match="element"):
            parse_structure(write_structure(tmp_path / "s.pdb", [line]))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.pdb"
        path.write_text("HEADER\n")
        with pytest.raises(DataError, match="no ATOM records"):
            parse_structure(path)

    def test_insertion_codes_separate_residues(self, tmp_path):
        lines = [
            atom_line(1, "CA", "ALA", "A", 1, 0, 0, 0, "C"),
            atom_line(2, "CA", "GLY", "A", 1, 4, 0, 0, "C", icode="A"),
        ]
        chains = parse_structure(write_structure(tmp_path / "s.pdb", lines))
        assert [a.res_ordinal for a in chains["A"]] == [0, 1]


class TestLabelInterfaces:
    def test_just_below_cutoff(self):
        ag = [make_atom("A", 0, 0.0, 0.0, 0.0)]
        ab = [make_atom("B", 0, 3.99, 0.0, 0.0)]
        ag_l, ab_l = label_interfaces(ag, ab)
        assert ag_l.tolist() == [1] and ab_l.tolist() == [1]

    def test_exactly_at_cutoff(self):
        ag = [make_atom("A", 0, 0.0, 0.0, 0.0)]
        ab = [make_atom("B", 0, 4.00, 0.0, 0.0)]
        ag_l, ab_l = label_interfaces(ag, ab)
        assert ag_l.tolist() == [0] and ab_l.tolist() == [0]

    def test_hydrogens_excluded(self):
        ag = [
            make_atom("A", 0, 0.0, 0.0, 0.0, element="H", name="H"),
            make_atom("A", 0, -0.2, 0.0, 0.0),
        ]
        ab = [
            make_atom("B", 0, 3.5, 0.0, 0.0, element="H", name="H"),
            make_atom("B", 0, 4.0, 0.0, 0.0),
        ]
        ag_l, ab_l = label_interfaces(ag, ab)
        assert ag_l.tolist() == [0] and ab_l.tolist() == [0]

    def test_deuterium_excluded(self):
        ag = [make_atom("A", 0, 0.0, 0.0, 0.0, element="D", name="D")]
        ab = [make_atom("B", 0, 1.0, 0.0, 0.0)]
        ag_l, ab_l = label_interfaces(ag, ab)
        assert ag_l.tolist() == [0]

    def test_contact_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ag = [
                make_atom("A", i, *rng.uniform(0, 12, size=3))
                for i in range(6)
            ]
            ab = [
                make_atom("B", j, *rng.uniform(0, 12, size=3))
                for j in range(5)
            ]
            ag_l, ab_l = label_interfaces(ag, ab)
            ag_l2, ab_l2 = label_interfaces(ab, ag)
            assert np.array_equal(ag_l, ab_l2)
            assert np.array_equal(ab_l, ag_l2)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(1)
        rotation, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        shift = rng.uniform(-30, 30, size=3)

        def move(atoms):
            out = []
            for a in atoms:
                x, y, z = rotation @ np.array([a.x, a.y, a.z]) + shift
                out.append(AtomRecord(a.chain_id, a.res_ordinal, a.res_name, a.atom_name, a.element, x, y, z))
            return out

        for _ in range(10):
            ag = [make_atom("A", i % 4, *rng.uniform(0, 15, size=3)) for i in range(12)]
            ab = [make_atom("B", j % 3, *rng.uniform(0, 15, size=3)) for j in range(9)]
            before = label_interfaces(ag, ab)
            after = label_interfaces(move(ag), move(ab))
            assert np.array_equal(before[0], after[0])
            assert np.array_equal(before[1], after[1])

    def test_residue_with_only_hydrogens_warned_and_zero(self, caplog):
        import logging

        ag = [
            make_atom("A", 0, 0.0, 0.0, 0.0, element="H", name="H"),
            make_atom("A", 1, 1.0, 0.0, 0.0),
        ]
        ab = [make_atom("B", 0, 1.5, 0.0, 0.0)]
        with caplog.at_level(logging.WARNING):
            ag_l, _ = label_interfaces(ag, ab)
        assert ag_l.tolist() == [0, 1]
        assert any("no heavy atoms" in r.message for r in caplog.records)


class TestResiduePatch:
    def test_isolated_residue_is_singleton(self):
        atoms = [make_atom("A", 0, 0, 0, 0), make_atom("A", 1, 50, 0, 0)]
        assert residue_patch(atoms, 0) == {0}

    def test_within_ten_angstrom(self):
        atoms = [make_atom("A", 0, 0, 0, 0), make_atom("A", 1, 9.9, 0, 0)]
        assert residue_patch(atoms, 0) == {0, 1}
        assert residue_patch(atoms, 1) == {0, 1}

    def test_exactly_ten_excluded(self):
        atoms = [make_atom("A", 0, 0, 0, 0), make_atom("A", 1, 10.0, 0, 0)]
        assert residue_patch(atoms, 0) == {0}

    def test_missing_center_rejected(self):
        atoms = [make_atom("A", 0, 0, 0, 0)]
        with pytest.raises(DataError, match="center"):
            residue_patch(atoms, 5)


class TestResolveAntibodyChains:
    def test_heavy_only_duplicates(self):
        record = ComplexRecord(
            "r1",
            {ChainRole.ABH: "EVQ", ChainRole.AG: "ACDEF"},
            {ChainRole.ABH: np.array([0, 1, 0])},
            {ChainRole.ABH: "h.emb"},
        )
        out = resolve_antibody_chains(record)
        assert out.seq[ChainRole.ABL] == "EVQ"
        assert out.labels[ChainRole.ABL].tolist() == [0, 1, 0]
        assert out.emb_path[ChainRole.ABL] == "h.emb"

    def test_light_only_duplicates(self):
        record = ComplexRecord("r2", {ChainRole.ABL: "DIQ", ChainRole.AG: "ACD"})
        out = resolve_antibody_chains(record)
        assert out.seq[ChainRole.ABH] == "DIQ"

    def test_both_present_unchanged(self):
        record = ComplexRecord("r3", {ChainRole.ABH: "EVQ", ChainRole.ABL: "DIQ", ChainRole.AG: "ACD"})
        assert resolve_antibody_chains(record) is record

    def test_neither_is_agnostic(self):
        record = ComplexRecord("r4", {ChainRole.AG: "ACD"})
        out = resolve_antibody_chains(record)
        assert not out.has(ChainRole.ABH) and not out.has(ChainRole.ABL)


class TestBuildFolds:
    def _records(self, sizes: dict[str, int]):
        records = []
        i = 0
        for cluster, size in sizes.items():
            for _ in range(size):
                records.append(ComplexRecord(f"id{i:05d}", {ChainRole.AG: "ACD"}, cluster=cluster))
                i += 1
        return records

    def test_divisible_cluster(self):
        folds = build_folds(self._records({"c1": 10}), k=5, seed=0)
        sizes = [sum(1 for f in folds.values() if f == i) for i in range(5)]
        assert sizes == [2, 2, 2, 2, 2]

    def test_remainder_spread(self):
        folds = build_folds(self._records({"c1": 7}), k=5, seed=0)
        sizes = sorted((sum(1 for f in folds.values() if f == i) for i in range(5)), reverse=True)
        assert sizes == [2, 2, 1, 1, 1]

    def test_partition_disjoint_and_covering(self):
        records = self._records({"a": 13, "b": 5, "c": 9})
        folds = build_folds(records, k=5, seed=3)
        assert set(folds) == {r.id for r in records}
        assert set(folds.values()) <= set(range(5))

    def test_per_cluster_balance(self):
        records = self._records({"a": 13, "b": 4, "c": 17})
        folds = build_folds(records, k=5, seed=2)
        for cluster in ("a", "b", "c"):
            sizes = [
                sum(1 for r in records if r.cluster == cluster and folds[r.id] == i)
                for i in range(5)
            ]
            assert max(sizes) - min(sizes) <= 1

    def test_deterministic_for_fixed_seed(self):
        records = self._records({"a": 11, "b": 6})
        assert build_folds(records, seed=4) == build_folds(records, seed=4)
        assert build_folds(records, seed=4) != build_folds(records, seed=5)

    def test_missing_cluster_rejected(self):
        records = [ComplexRecord("x", {ChainRole.AG: "ACD"})]
        with pytest.raises(DataError, match="cluster"):
            build_folds(records)

    def test_k_below_two_rejected(self):
        with pytest.raises(DataError, match="fold count"):
            build_folds(self._records({"a": 4}), k=1)


class TestManifestIO:
    def _record(self):
        return ComplexRecord(
            "m1",
            {ChainRole.ABH: "EVQLV", ChainRole.ABL: "DIQ", ChainRole.AG: "ACDEFG"},
            {ChainRole.AG: np.array([0, 1, 1, 0, 0, 0])},
            {ChainRole.AG: "m1.ag.emb"},
            cluster="c2",
        )

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_manifest([self._record()], path)
        records = load_manifest(path)
        assert len(records) == 1
        r = records[0]
        assert r.id == "m1"
        assert r.seq[ChainRole.AG] == "ACDEFG"
        assert r.labels[ChainRole.AG].tolist() == [0, 1, 1, 0, 0, 0]
        assert r.cluster == "c2"
        # Relative paths resolve against the manifest directory.
        assert r.emb_path[ChainRole.AG] == str(tmp_path / "m1.ag.emb")

    def test_label_length_mismatch_rejected(self):
        with pytest.raises(DataError, match="label length"):
            record_from_json({"id": "x", "ag_seq": "ACD", "ag_labels": [0, 1]})

    def test_bad_json_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "ag_seq": "ACD"}\nnot json\n')
        with pytest.raises(DataError, match="line 2"):
            load_manifest(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        line = '{"id": "a", "ag_seq": "ACD"}\n'
        path.write_text(line + line)
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(path)

    def test_clusters_and_folds_io(self, tmp_path):
        cpath = tmp_path / "clusters.tsv"
        cpath.write_text("a\tc1\nb\tc2\n")
        clusters = load_clusters(cpath)
        assert clusters == {"a": "c1", "b": "c2"}
        records = [
            ComplexRecord("a", {ChainRole.AG: "ACD"}),
            ComplexRecord("b", {ChainRole.AG: "ACD"}),
        ]
        records = attach_clusters(records, clusters)
        folds = build_folds(records, k=2, seed=0)
        fpath = tmp_path / "folds.tsv"
        write_folds(folds, fpath)
        assert load_folds(fpath) == folds

    def test_json_field_names(self):
        obj = record_to_json(self._record())
        assert set(obj) == {"id", "abh_seq", "abl_seq", "ag_seq", "ag_labels", "ag_emb", "cluster"}


class TestEncodeRecord:
    def test_onehot_encoding(self):
        record = ComplexRecord("e1", {ChainRole.AG: "ACD"})
        arrays = encode_record(record, encoder="onehot", window=2)
        assert arrays[ChainRole.AG].emb.shape == (3, 21 * 5)
        assert arrays[ChainRole.ABH].length == 0

    def test_external_requires_paths(self):
        record = ComplexRecord("e2", {ChainRole.AG: "ACD"})
        with pytest.raises(DataError, match="embedding"):
            encode_record(record, encoder="external")

    def test_unknown_encoder(self):
        record = ComplexRecord("e3", {ChainRole.AG: "ACD"})
        with pytest.raises(DataError, match="encoder"):
            encode_record(record, encoder="esm")
