#!/usr/bin/env python3
"""Regenerates the synthetic PubTator fixtures under data/synthetic/.

Every entity mention is written with offsets computed from the assembled
title + " " + abstract text, so the output always parses strictly.
"""
import pathlib

ENTITIES = {
    "aspirin": ("ChemicalEntity", "D001241"),
    "metformin": ("ChemicalEntity", "D008687"),
    "cisplatin": ("ChemicalEntity", "D002945"),
    "TP53": ("GeneOrGeneProduct", "7157"),
    "BRCA1": ("GeneOrGeneProduct", "672"),
    "EGFR": ("GeneOrGeneProduct", "1956"),
    "IL6": ("GeneOrGeneProduct", "3569"),
    "interleukin 6": ("GeneOrGeneProduct", "3569"),
    "diabetes": ("DiseaseOrPhenotypicFeature", "D003920"),
    "breast cancer": ("DiseaseOrPhenotypicFeature", "D001943"),
    "hepatitis": ("DiseaseOrPhenotypicFeature", "D006505"),
    "asthma": ("DiseaseOrPhenotypicFeature", "D001249"),
    "rs1042522": ("SequenceVariant", "rs1042522"),
    "tumor": ("DiseaseOrPhenotypicFeature", "-"),
    "EGFR/IL6": ("GeneOrGeneProduct", "1956,3569"),
}

# Each document: (pmid, title segments, abstract segments, relations).
# Segments are plain strings; entity surfaces are wrapped in {braces}.
TRAIN = [
    ("1001",
     "{aspirin} binds {TP53} in {breast cancer} cells.",
     "Treatment with {aspirin} increased {TP53} levels. {TP53} loss is associated with {breast cancer}.",
     [("D001241", "7157", "Bind", "Novel"),
      ("7157", "D001943", "Association", "No")]),
    ("1002",
     "{metformin} lowers risk of {diabetes}.",
     "{metformin} reduced {diabetes} symptoms while {IL6} rose. High {interleukin 6} correlates with {diabetes}.",
     [("D008687", "D003920", "Negative_Correlation", "Novel"),
      ("3569", "D003920", "Positive_Correlation", "No")]),
    ("1003",
     "{cisplatin} and {BRCA1} in {breast cancer}.",
     "{BRCA1} mutation increases {cisplatin} sensitivity. {cisplatin} treats {breast cancer} and {tumor} growth.",
     [("672", "D002945", "Association", "Novel"),
      ("D001943", "D002945", "Negative_Correlation", "No")]),
    ("1004",
     "{EGFR} variant {rs1042522} and {asthma}.",
     "The {rs1042522} allele of {TP53} was associated with {asthma}. {EGFR} binds {TP53}.",
     [("D001249", "rs1042522", "Association", "Novel"),
      ("1956", "7157", "Bind", "No"),
      ("7157", "rs1042522", "Association", "No")]),
    ("1005",
     "{IL6} drives {hepatitis}.",
     "{IL6} expression increased {hepatitis} severity. {aspirin} reduced {IL6} production.",
     [("3569", "D006505", "Positive_Correlation", "Novel"),
      ("3569", "D001241", "Negative_Correlation", "Novel")]),
    ("1006",
     "{metformin} binds {EGFR}.",
     "{metformin} binds {EGFR} and reduced {breast cancer} growth. {EGFR/IL6} signalling was studied.",
     [("1956", "D008687", "Bind", "Novel"),
      ("D001943", "D008687", "Negative_Correlation", "No")]),
    ("1007",
     "{BRCA1} in {hepatitis} and {diabetes}.",
     "{BRCA1} levels rose in {hepatitis}. {diabetes} was associated with {hepatitis}.",
     [("672", "D006505", "Positive_Correlation", "No"),
      ("D003920", "D006505", "Association", "Novel")]),
    ("1008",
     "{cisplatin} causes {asthma}.",
     "{cisplatin} increased {asthma} risk. {TP53} binds {cisplatin} in {asthma} patients.",
     [("D001249", "D002945", "Positive_Correlation", "Novel"),
      ("7157", "D002945", "Bind", "No")]),
]

DEV = [
    ("2001",
     "{aspirin} binds {EGFR}.",
     "{aspirin} binds {EGFR} in {asthma}. {EGFR} loss is associated with {asthma}.",
     [("1956", "D001241", "Bind", "Novel"),
      ("1956", "D001249", "Association", "No")]),
    ("2002",
     "{metformin} lowers {hepatitis}.",
     "{metformin} reduced {hepatitis} symptoms while {TP53} rose.",
     [("D006505", "D008687", "Negative_Correlation", "Novel")]),
    ("2003",
     "{IL6} drives {breast cancer}.",
     "{IL6} expression increased {breast cancer} severity. {BRCA1} binds {IL6}.",
     [("3569", "D001943", "Positive_Correlation", "Novel"),
      ("3569", "672", "Bind", "No")]),
]


def render(text):
    """Splits a {braced} template into plain text and (start, end, surface) spans."""
    out, spans, i = [], [], 0
    while i < len(text):
        if text[i] == "{":
            j = text.index("}", i)
            surface = text[i + 1:j]
            spans.append((len("".join(out)), surface))
            out.append(surface)
            i = j + 1
        else:
            out.append(text[i])
            i += 1
    return "".join(out), spans


def block(pmid, title_t, abstract_t, relations):
    title, tspans = render(title_t)
    abstract, aspans = render(abstract_t)
    lines = [f"{pmid}|t|{title}", f"{pmid}|a|{abstract}"]
    offset = len(title) + 1
    mentions = [(s, s + len(m), m) for s, m in tspans]
    mentions += [(offset + s, offset + s + len(m), m) for s, m in aspans]
    for start, end, surface in mentions:
        etype, ident = ENTITIES[surface]
        lines.append(f"{pmid}\t{start}\t{end}\t{surface}\t{etype}\t{ident}")
    for a, b, rtype, nov in relations:
        lines.append(f"{pmid}\t{rtype}\t{a}\t{b}\t{nov}")
    return "\n".join(lines) + "\n"


def main():
    root = pathlib.Path(__file__).resolve().parent / "synthetic"
    root.mkdir(exist_ok=True)
    for name, docs in (("train", TRAIN), ("dev", DEV)):
        text = "\n".join(block(*d) for d in docs)
        (root / f"{name}.pubtator").write_text(text)


if __name__ == "__main__":
    main()
