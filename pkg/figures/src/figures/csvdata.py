"""Reader for the result CSV contract.

Columns (exact header):
method,metric,l,mean,variance,stderr,replications,m,n,gamma,t,s,coupling,sigma,z,config_hash
"""

import csv
from dataclasses import dataclass

EXPECTED_HEADER = ("method,metric,l,mean,variance,stderr,replications,"
                   "m,n,gamma,t,s,coupling,sigma,z,config_hash")

_FLOATS = ("mean", "variance", "stderr", "gamma", "t", "s", "coupling",
           "sigma", "z")
_INTS = ("l", "replications", "m", "n")


@dataclass
class Rows:
    rows: list

    def where(self, **sel):
        """Rows matching every selector (floats compared with tolerance)."""
        out = []
        for r in self.rows:
            ok = True
            for key, want in sel.items():
                have = r[key]
                if isinstance(have, float):
                    ok = abs(have - float(want)) <= 1e-9 * max(1.0, abs(float(want)))
                else:
                    ok = have == want
                if not ok:
                    break
            if ok:
                out.append(r)
        return Rows(out)

    def distinct(self, key):
        seen = []
        for r in self.rows:
            if r[key] not in seen:
                seen.append(r[key])
        return sorted(seen)

    def curve(self):
        """(l, mean, stderr, variance, m, replications) arrays sorted by l."""
        rows = sorted(self.rows, key=lambda r: r["l"])
        return rows

    def __len__(self):
        return len(self.rows)


def read_csv(paths):
    if isinstance(paths, (str, bytes)) or hasattr(paths, "read_text"):
        paths = [paths]
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != EXPECTED_HEADER:
                raise ValueError(f"unexpected CSV header in {path}: {header!r}")
            reader = csv.DictReader(fh, fieldnames=EXPECTED_HEADER.split(","))
            for rec in reader:
                row = dict(rec)
                for k in _FLOATS:
                    row[k] = float(row[k])
                for k in _INTS:
                    row[k] = int(row[k])
                rows.append(row)
    return Rows(rows)
