#!/usr/bin/env python3
"""Serve the mock teacher on a fixed port for manual pipeline runs.

The server speaks the same chat-completions and embeddings endpoints
the real teacher does, so a config file pointed at it exercises the
whole pipeline without external services. Optional flags inject the
noise markers used to demonstrate curation behavior.
"""

import argparse
import logging
import sys
import time

from docalign.mock_teacher import MockTeacherLogic, MockTeacherServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--port", type=int, default=8731)
    parser.add_argument(
        "--instruct-noise",
        action="store_true",
        help="inject duplicate, too-short, and malformed question lines",
    )
    parser.add_argument(
        "--pref-noise",
        action="store_true",
        help="inject malformed and self-identical preference lines",
    )
    parser.add_argument(
        "--judge-policy",
        choices=("hash", "first", "marker"),
        default="hash",
        help="how the mock judge picks winners",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")

    logic = MockTeacherLogic(
        inject_instruct_noise=args.instruct_noise,
        inject_pref_noise=args.pref_noise,
        judge_policy=args.judge_policy,
    )
    server = MockTeacherServer(logic, port=args.port)
    server.start()
    print(f"mock teacher listening at {server.base_url} (ctrl-c to stop)")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        print("stopping")
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
