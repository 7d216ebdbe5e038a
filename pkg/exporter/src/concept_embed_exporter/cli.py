"""Command line: concept-embed-export --list concepts.json --out matrix.json"""

from __future__ import annotations

import argparse
import sys

from .embed import EmbedderError, resolve_embedder
from .export import ConceptListError, export_concepts, load_concept_list


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="concept-embed-export",
        description="Embed concept texts into a concept-matrix JSON file")
    parser.add_argument("--list", dest="list_path", required=True,
                        help="concept list JSON ({'concepts': [{name, text}...]})")
    parser.add_argument("--model", default="hash:64",
                        help="hash[:<dim>] (offline) or st:<model-name>")
    parser.add_argument("--out", required=True, help="output matrix path")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        concepts = load_concept_list(args.list_path)  # validated before any model call
        embedder = resolve_embedder(args.model)
        payload = export_concepts(concepts, embedder, args.out)
    except (ConceptListError, EmbedderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}: {len(payload['concepts'])} concepts, "
          f"dim {payload['dim']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
