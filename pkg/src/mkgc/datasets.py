"""Dataset directories on disk.

Layout::

    <lang>.train.tsv / <lang>.valid.tsv / <lang>.test.tsv   head<TAB>relation<TAB>tail
    <lang>.tsv                                              unsplit alternative (split 60/30/10)
    seed_alignment.tsv                                      lang_a<TAB>entity_a<TAB>lang_b<TAB>entity_b
    ground_truth.tsv                                        optional, same format
    text_embeddings.jsonl                                   optional
"""
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputDataError
from .kg import AlignmentPair, LanguageKG, split_triples

SPLITS = ("train", "valid", "test")
SEED_FILE = "seed_alignment.tsv"
TRUTH_FILE = "ground_truth.tsv"
TEXT_FILE = "text_embeddings.jsonl"


def read_rows(path, width):
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise InputDataError(f"{path}:{lineno}: expected {width} tab-separated fields, got {len(parts)}")
            rows.append(parts)
    return rows


def write_triples(path, kg, triples):
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in np.asarray(triples).tolist():
            f.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


def write_pairs(path, kgs, pairs):
    by_lang = {kg.language: kg for kg in kgs}
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(f"{p.lang_a}\t{by_lang[p.lang_a].entities[p.local_a]}\t"
                    f"{p.lang_b}\t{by_lang[p.lang_b].entities[p.local_b]}\n")


@dataclass
class Dataset:
    kgs: list
    seed_pairs: list
    truth_pairs: list = None
    text_path: str = None

    def labels(self):
        return {kg.language: {e: i for i, e in enumerate(kg.entities)} for kg in self.kgs}


def save_dataset(directory, kgs, seed_pairs, truth_pairs=None):
    os.makedirs(directory, exist_ok=True)
    for kg in kgs:
        for split in SPLITS:
            write_triples(os.path.join(directory, f"{kg.language}.{split}.tsv"), kg, getattr(kg, split))
    write_pairs(os.path.join(directory, SEED_FILE), kgs, seed_pairs)
    if truth_pairs is not None:
        write_pairs(os.path.join(directory, TRUTH_FILE), kgs, truth_pairs)


def _languages(directory):
    langs = set()
    for name in os.listdir(directory):
        if not name.endswith(".tsv") or name in (SEED_FILE, TRUTH_FILE):
            continue
        stem = name[:-4]
        for split in SPLITS:
            if stem.endswith("." + split):
                stem = stem[: -len(split) - 1]
                break
        langs.add(stem)
    return sorted(langs)


def load_dataset(directory, split_seed=0, ratios=(0.6, 0.3, 0.1)):
    """Load every language found in ``directory``; labels are interned in file order."""
    if not os.path.isdir(directory):
        raise InputDataError(f"dataset directory not found: {directory}")
    langs = _languages(directory)
    if not langs:
        raise InputDataError(f"{directory}: no triple files")
    raw = {}
    relations = {}
    for lang in langs:
        ents = {}
        parts = {}
        split_files = [os.path.join(directory, f"{lang}.{s}.tsv") for s in SPLITS]
        if all(os.path.exists(p) for p in split_files):
            sources = list(zip(SPLITS, split_files))
        else:
            single = os.path.join(directory, f"{lang}.tsv")
            if not os.path.exists(single):
                raise InputDataError(f"{directory}: incomplete split files for language {lang}")
            sources = [("all", single)]
        for split, path in sources:
            rows = []
            for h, r, t in read_rows(path, 3):
                for e in (h, t):
                    ents.setdefault(e, len(ents))
                relations.setdefault(r, len(relations))
                rows.append((ents[h], r, ents[t]))
            parts[split] = rows
        raw[lang] = (ents, parts)
    rel_vocab = tuple(relations)
    kgs = []
    for lang in langs:
        ents, parts = raw[lang]
        conv = {k: np.array([(h, relations[r], t) for h, r, t in v], dtype=np.int64).reshape(-1, 3)
                for k, v in parts.items()}
        if "all" in conv:
            train, valid, test = split_triples(conv["all"], ratios, split_seed)
        else:
            train, valid, test = conv["train"], conv["valid"], conv["test"]
        kgs.append(LanguageKG(lang, tuple(ents), rel_vocab, train, valid, test))
    labels = {kg.language: {e: i for i, e in enumerate(kg.entities)} for kg in kgs}
    seed = load_pairs(os.path.join(directory, SEED_FILE), labels) if os.path.exists(
        os.path.join(directory, SEED_FILE)) else []
    truth_path = os.path.join(directory, TRUTH_FILE)
    truth = load_pairs(truth_path, labels) if os.path.exists(truth_path) else None
    text_path = os.path.join(directory, TEXT_FILE)
    return Dataset(kgs, seed, truth, text_path if os.path.exists(text_path) else None)


def load_pairs(path, labels, provenance="seed"):
    pairs = []
    for la, ea, lb, eb in read_rows(path, 4):
        for lang, ent in ((la, ea), (lb, eb)):
            if lang not in labels or ent not in labels[lang]:
                raise InputDataError(f"{path}: alignment pair references unknown entity {lang}/{ent}")
        pairs.append(AlignmentPair(la, labels[la][ea], lb, labels[lb][eb], provenance))
    return pairs


def write_id_maps(directory, fused):
    with open(os.path.join(directory, "entity_ids.tsv"), "w", encoding="utf-8") as f:
        for kg in fused.kgs:
            start, _ = fused.language_range(kg.language)
            for i, label in enumerate(kg.entities):
                f.write(f"{kg.language}:{label}\t{start + i}\n")
    with open(os.path.join(directory, "relation_ids.tsv"), "w", encoding="utf-8") as f:
        for i, label in enumerate(fused.relation_labels):
            f.write(f"{label}\t{i}\n")


def read_id_map(path):
    return {label: int(i) for label, i in read_rows(path, 2)}


def dataset_hashes(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if os.path.isfile(path):
            with open(path, "rb") as f:
                out[name] = hashlib.sha256(f.read()).hexdigest()
    return out
