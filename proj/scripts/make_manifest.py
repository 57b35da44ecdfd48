#!/usr/bin/env python3
"""Write <domain_dir>/manifest.csv for a directory of pre-cropped face frames.

Labels and attack types are inferred from path components:

    real, live, bonafide, genuine          -> real, none
    print, printed, photo, paper           -> spoof, print
    replay, video, screen, display, mobile -> spoof, replay
    anything else under spoof/attack/fake  -> spoof, other

Use --map KEYWORD=LABEL:ATTACK to add or override a rule, e.g.
--map client=real:none --map highdef=spoof:replay. Keywords match whole
underscore- or dash-separated tokens of the path.

The datasets root passed to `flip --data-root` must hold one directory per
registry name (msu_mfsd, casia_mfsd, replay_attack, oulu_npu, wmca,
casia_cefa, casia_surf, celeba_spoof), each with its manifest.csv.
"""

import argparse
import csv
import sys
from pathlib import Path

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}

DEFAULT_RULES = {
    "real": ("real", "none"),
    "live": ("real", "none"),
    "bonafide": ("real", "none"),
    "genuine": ("real", "none"),
    "print": ("spoof", "print"),
    "printed": ("spoof", "print"),
    "photo": ("spoof", "print"),
    "paper": ("spoof", "print"),
    "replay": ("spoof", "replay"),
    "video": ("spoof", "replay"),
    "screen": ("spoof", "replay"),
    "display": ("spoof", "replay"),
    "mobile": ("spoof", "replay"),
    "spoof": ("spoof", "other"),
    "attack": ("spoof", "other"),
    "fake": ("spoof", "other"),
}


def parse_map(items):
    rules = dict(DEFAULT_RULES)
    for item in items:
        try:
            key, value = item.split("=", 1)
            label, attack = value.split(":", 1)
        except ValueError:
            sys.exit(f"bad --map '{item}', expected KEYWORD=LABEL:ATTACK")
        if label not in ("real", "spoof") or attack not in ("none", "print", "replay", "other"):
            sys.exit(f"bad --map '{item}': label real|spoof, attack none|print|replay|other")
        rules[key.lower()] = (label, attack)
    return rules


def classify(rel: Path, rules):
    """Spoof keywords beat real ones; a specific attack type beats "other"."""
    hits = []
    for part in rel.parts[:-1] + (rel.stem,):
        for token in part.lower().replace("-", "_").split("_"):
            if token in rules:
                hits.append(rules[token])
    spoof = [h for h in hits if h[0] == "spoof"]
    if spoof:
        specific = [h for h in spoof if h[1] != "other"]
        return (specific or spoof)[0]
    return hits[0] if hits else None


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("domain_dir", type=Path, help="directory of one dataset, e.g. $FLIP_DATA_ROOT/msu_mfsd")
    ap.add_argument("--map", action="append", default=[], help="extra keyword rule KEYWORD=LABEL:ATTACK")
    ap.add_argument("--dry-run", action="store_true", help="print counts without writing")
    args = ap.parse_args()

    rules = parse_map(args.map)
    rows, skipped = [], []
    for path in sorted(args.domain_dir.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = path.relative_to(args.domain_dir)
        hit = classify(rel, rules)
        if hit is None:
            skipped.append(rel)
            continue
        sample_id = rel.with_suffix("").as_posix().replace("/", "__")
        rows.append((sample_id, rel.as_posix(), hit[0], hit[1]))

    counts = {}
    for _, _, label, attack in rows:
        counts[(label, attack)] = counts.get((label, attack), 0) + 1
    for (label, attack), n in sorted(counts.items()):
        print(f"{label:5s} {attack:6s} {n}")
    if skipped:
        print(f"{len(skipped)} image(s) matched no rule, e.g. {skipped[0]}", file=sys.stderr)
    if not any(label == "real" for _, _, label, _ in rows) or not any(label == "spoof" for _, _, label, _ in rows):
        sys.exit("need both real and spoof images")
    if args.dry_run:
        return
    with open(args.domain_dir / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "relative_path", "label", "attack_type"])
        w.writerows(rows)
    print(f"wrote {args.domain_dir / 'manifest.csv'} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
