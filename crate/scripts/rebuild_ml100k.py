#!/usr/bin/env python3
"""Rebuild the stock MovieLens-100K files from the copy bundled in the RecBole wheel.

RecBole ships ml-100k as tab-separated "atomic" files that keep the original
u.data event order, so u.data and the u1..u5 base/test splits can be
regenerated exactly (the splits follow the dataset's own mku.sh: the i-th
block of 20000 lines of u.data is u{i}.test, the rest is u{i}.base, both
sorted by user then item).  u.item loses the day/month of the release date
and the IMDb URL; the release year and genre flags survive.

usage: rebuild_ml100k.py RECBOLE_WHEEL OUT_DIR
"""
import io
import os
import sys
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def atomic_rows(zf, name):
    text = zf.read("recbole/dataset_example/ml-100k/" + name).decode("latin-1")
    lines = text.splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    zf = zipfile.ZipFile(wheel)

    events = [(int(u), int(i), int(float(r)), int(float(t)))
              for u, i, r, t in atomic_rows(zf, "ml-100k.inter")]
    assert len(events) == 100000

    def write_events(path, rows):
        with open(path, "w") as f:
            for u, i, r, t in rows:
                f.write(f"{u}\t{i}\t{r}\t{t}\n")

    write_events(os.path.join(out, "u.data"), events)
    for k in range(1, 6):
        lo, hi = (k - 1) * 20000, k * 20000
        test = sorted(events[lo:hi], key=lambda e: (e[0], e[1]))
        base = sorted(events[:lo] + events[hi:], key=lambda e: (e[0], e[1]))
        write_events(os.path.join(out, f"u{k}.test"), test)
        write_events(os.path.join(out, f"u{k}.base"), base)

    with open(os.path.join(out, "u.user"), "w") as f:
        for row in atomic_rows(zf, "ml-100k.user"):
            f.write("|".join(row[:5]) + "\n")

    with open(os.path.join(out, "u.item"), "w", encoding="latin-1") as f:
        for row in atomic_rows(zf, "ml-100k.item"):
            row += [""] * (4 - len(row))
            item, title, year, classes = row[:4]
            if year.isdigit():
                title = f"{title} ({year})"
                date = f"01-Jan-{year}"
            else:
                title, date = "unknown", ""
            flags = set(classes.split())
            bits = ["1" if g in flags else "0" for g in GENRES]
            f.write("|".join([item, title, date, "", ""] + bits) + "\n")


if __name__ == "__main__":
    main()
