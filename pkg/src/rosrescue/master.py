"""Entry point for the registration master binary.

Plain mode keeps everything in memory, exactly like a stock master.
``--rescue`` adds the fault-tolerance machinery: recover state from the
last checkpoint (probing checkpointed nodes and re-notifying their
subscribers), then persist every metadata change through the background
checkpoint writer.
"""
from __future__ import annotations

import argparse
import logging
import signal
import sys

from .checkpoint import DEFAULT_CHECKPOINT_PATH, CheckpointWriter
from .endpoint import DEFAULT_PORT, RESCUE_BANNER, MasterEndpoint, MasterEndpointConfig
from .recovery import RecoveryError, recover
from .registry import Registry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rescue_master",
        description="Pub/sub registration master with optional crash tolerance",
    )
    p.add_argument("--rescue", action="store_true",
                   help="enable checkpoint logging and startup recovery")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--bind-host", default="127.0.0.1")
    p.add_argument("--checkpoint-path", default=DEFAULT_CHECKPOINT_PATH,
                   help=f"checkpoint file location (default {DEFAULT_CHECKPOINT_PATH})")
    p.add_argument("--test-hooks", action="store_true",
                   help="expose the injectCrash fault-injection method (testing only)")
    return p


def run(config: MasterEndpointConfig) -> int:
    registry = Registry()
    writer = None
    if config.rescue_enabled:
        writer = CheckpointWriter(config.checkpoint_path)
        writer.start()  # creates the checkpoint directory
        try:
            state, _report = recover(config.checkpoint_path)
        except RecoveryError as e:
            print(f"error: {e}", file=sys.stderr, flush=True)
            return 1
        registry.replace_state(state)
        registry.on_change = writer.enqueue
        writer.enqueue(registry.snapshot())
        print(RESCUE_BANNER, flush=True)

    try:
        endpoint = MasterEndpoint(config, registry, writer=writer)
    except OSError as e:
        print(f"error: cannot bind {config.bind_host}:{config.port}: {e}",
              file=sys.stderr, flush=True)
        return 1
    print(f"master listening on {endpoint.uri}", flush=True)

    def _terminate(signum, frame):
        raise SystemExit(0)

    signal.signal(signal.SIGTERM, _terminate)
    try:
        endpoint.serve_forever()
    except (KeyboardInterrupt, SystemExit):
        pass
    finally:
        endpoint.shutdown()
        if writer is not None:
            writer.stop()
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    config = MasterEndpointConfig(
        bind_host=args.bind_host,
        port=args.port,
        rescue_enabled=args.rescue,
        checkpoint_path=args.checkpoint_path,
        test_hooks=args.test_hooks,
    )
    return run(config)


if __name__ == "__main__":
    raise SystemExit(main())
