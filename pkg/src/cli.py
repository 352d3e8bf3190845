import logging
import sys
from typing import List, Optional

from .errors import StageError
from .input_parse import parse_args
from .pipeline import STAGES


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    command, cfg, args = parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    log = logging.getLogger(__name__)
    log.info(f"[RUN] command={command} config={args.config or '(defaults)'}")
    for k, v in cfg.to_dict().items():
        log.debug(f"[RUN]   {k} = {v}")

    stage = STAGES[command]
    try:
        if command == "reorder-mesh":
            out = stage(cfg, connectivity=args.connectivity)
        else:
            out = stage(cfg)
    except StageError as e:
        print(f"[RUN][ERROR] stage '{e.stage}' failed: {e.cause}", file=sys.stderr)
        return e.exit_code
    print(f"✅ {command} complete. Wrote: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
