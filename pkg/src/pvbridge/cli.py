"""Command line tools: pvup, pvgw, pvioc, pvarc, pvbench.

Servers print one ``READY {json}`` line on stdout once they accept clients
and then run until SIGINT/SIGTERM.
"""
from __future__ import annotations

import asyncio
import csv
import json
import logging
import math
import signal
import sys
from pathlib import Path

import click

from . import archiver as arc
from . import bench, netio
from .gateway import generate_database, load_database, save_database, serve_gateway
from .refioc import serve_refioc
from .upstream import DEFAULT_PREFIX, SimConfig, deploy_upstream, load_pvlist


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _ready(**info):
    print("READY " + json.dumps(info), flush=True)


async def _until_signalled():
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()


def _addr(addr) -> str:
    return f"{addr[0]}:{addr[1]}"


echo_opt = click.option("--echo-period", type=float, default=netio.ECHO_PERIOD_S, show_default=True,
                        help="Keepalive echo period in seconds.")
drop_opt = click.option("--drop-event-at", type=int, default=None,
                        help="Fault injection: silently drop the N-th posted event.")
verbose_opt = click.option("-v", "--verbose", is_flag=True)


# -- pvup -------------------------------------------------------------------

@click.group()
def pvup():
    """Upstream data source (PLAIN values)."""


@pvup.command("serve")
@click.option("--db", "pvlist", required=True, type=click.Path(exists=True), help="PV list file.")
@click.option("--bind", default="127.0.0.1:0", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fsm-cycle", type=float, default=20.0, show_default=True,
              help="Autopilot start/stop period in seconds (0 disables).")
@echo_opt
@drop_opt
@verbose_opt
def pvup_serve(pvlist, bind, seed, fsm_cycle, echo_period, drop_event_at, verbose):
    _setup_logging(verbose)
    config = SimConfig(seed=seed, fsm_cycle_s=fsm_cycle or None)

    async def main():
        srv = await deploy_upstream(load_pvlist(pvlist), bind, config, echo_period=echo_period,
                                    drop_event_at=drop_event_at)
        _ready(addr=_addr(srv.address), init_s=srv.deploy_time_s, pvs=len(srv.variables))
        await _until_signalled()
        await srv.close()

    asyncio.run(main())


# -- pvgw -------------------------------------------------------------------

@click.group()
def pvgw():
    """Gateway: database generation and serving."""


@pvgw.command("generate")
@click.option("--pvlist", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--prefix", default=DEFAULT_PREFIX, show_default=True)
@click.option("--no-source", is_flag=True, help="Omit SRC fields.")
def pvgw_generate(pvlist, out, prefix, no_source):
    db = generate_database(load_pvlist(pvlist), prefix, include_source=not no_source)
    save_database(db, out)
    click.echo(f"wrote {len(db)} records to {out}")


@pvgw.command("serve")
@click.option("--db", required=True, type=click.Path(exists=True))
@click.option("--upstream", required=True, help="host:port of the upstream server.")
@click.option("--bind", default="127.0.0.1:0", show_default=True)
@echo_opt
@drop_opt
@verbose_opt
def pvgw_serve(db, upstream, bind, echo_period, drop_event_at, verbose):
    _setup_logging(verbose)

    async def main():
        gw = await serve_gateway(load_database(db), upstream, bind, echo_period=echo_period,
                                 drop_event_at=drop_event_at)
        _ready(addr=_addr(gw.address), init_s=gw.init_time_s, pvs=len(gw.entries))
        await _until_signalled()
        await gw.close()

    asyncio.run(main())


# -- pvioc ------------------------------------------------------------------

@click.group()
def pvioc():
    """Reference IOC serving records directly."""


@pvioc.command("serve")
@click.option("--db", required=True, type=click.Path(exists=True))
@click.option("--bind", default="127.0.0.1:0", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fsm-cycle", type=float, default=20.0, show_default=True)
@echo_opt
@drop_opt
@verbose_opt
def pvioc_serve(db, bind, seed, fsm_cycle, echo_period, drop_event_at, verbose):
    _setup_logging(verbose)
    config = SimConfig(seed=seed, fsm_cycle_s=fsm_cycle or None)

    async def main():
        ioc = await serve_refioc(load_database(db), bind, config, echo_period=echo_period,
                                 drop_event_at=drop_event_at)
        _ready(addr=_addr(ioc.address), init_s=ioc.init_time_s, pvs=len(ioc.records))
        await _until_signalled()
        await ioc.close()

    asyncio.run(main())


# -- pvarc ------------------------------------------------------------------

@click.group()
def pvarc():
    """Batch archiver."""


def _resolve_pvs(pattern: str, db_path) -> list[str]:
    if db_path:
        import fnmatch
        names = [r.name for r in load_database(db_path).records]
        return [n for n in names if fnmatch.fnmatchcase(n, pattern)]
    return [p for p in pattern.split(",") if p]


@pvarc.command("record")
@click.option("--sub", required=True, help="host:port to subscribe to.")
@click.option("--pvs", required=True, help="Glob pattern (with --db) or comma-separated names.")
@click.option("--dir", "directory", required=True, type=click.Path())
@click.option("--db", "db_path", type=click.Path(exists=True), default=None,
              help="Database whose record names the pattern is matched against.")
@click.option("--flush-period", type=float, default=arc.FLUSH_PERIOD_S, show_default=True)
@click.option("--duration", type=float, default=None, help="Stop after this many seconds.")
@echo_opt
@verbose_opt
def pvarc_record(sub, pvs, directory, db_path, flush_period, duration, echo_period, verbose):
    _setup_logging(verbose)
    names = _resolve_pvs(pvs, db_path)
    if not names:
        raise click.UsageError(f"no PVs match {pvs!r}")

    async def main():
        store = arc.Archiver(directory, flush_period=flush_period)
        client = await netio.PVClient.connect(*netio.parse_addr(sub), echo_period=echo_period, label="pvarc")
        infos = await client.create_channels(names)
        missing = [n for n, i in infos.items() if i is None]
        if missing:
            logging.getLogger("pvarc").warning("not served: %s", ", ".join(missing[:20]))
        store.start()
        for name, info in infos.items():
            if info is not None:
                client.subscribe(info, lambda v, n=name: store.append(arc.sample_from_wire(n, v)))
        _ready(pvs=len(names) - len(missing), dir=str(directory))
        if duration is not None:
            try:
                await asyncio.wait_for(_until_signalled(), duration)
            except asyncio.TimeoutError:
                pass
        else:
            await _until_signalled()
        client.close()
        await asyncio.to_thread(store.stop)
        acc = store.accounting()
        click.echo(json.dumps({"appended": acc.appended, "durable": acc.durable, "dropped": acc.dropped}))

    asyncio.run(main())


@pvarc.command("query")
@click.option("--dir", "directory", required=True, type=click.Path(exists=True))
@click.option("--pv", required=True)
@click.option("--from", "t_from", type=float, default=-math.inf)
@click.option("--to", "t_to", type=float, default=math.inf)
@click.option("--csv", "as_csv", is_flag=True)
def pvarc_query(directory, pv, t_from, t_to, as_csv):
    store = arc.Archiver(directory)
    samples = store.query(pv, t_from, t_to)
    if as_csv:
        w = csv.writer(sys.stdout)
        w.writerow(["pv", "time_s", "seconds", "nanoseconds", "value", "severity", "status"])
        for s in samples:
            ts = s.value.timestamp
            w.writerow([s.pv, f"{s.t:.9f}", ts.seconds, ts.nanoseconds, s.value.value,
                        s.value.severity.name, s.value.condition.name])
    else:
        for s in samples:
            click.echo(f"{s.pv} {s.t:.6f} {s.value.value} {s.value.severity.name} {s.value.condition.name}")


@pvarc.command("gaps")
@click.option("--dir", "directory", required=True, type=click.Path(exists=True))
@click.option("--pv", required=True)
@click.option("--period", type=float, required=True)
@click.option("--factor", type=float, default=2.0, show_default=True)
def pvarc_gaps(directory, pv, period, factor):
    gaps = arc.archive_gaps(arc.Archiver(directory), pv, period, factor)
    for g in gaps:
        click.echo(f"{g.t_before:.6f} {g.t_after:.6f} {g.span_s:.3f}")
    click.echo(f"{len(gaps)} gaps", err=True)


# -- pvbench ----------------------------------------------------------------

@click.group()
def pvbench():
    """Two-arm test bench."""


@pvbench.command("run")
@click.option("--scenario", type=click.Choice(bench.SCENARIOS), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Scenario file with a [scenario] section.")
@click.option("--records", type=int, default=None)
@click.option("--duration", type=float, default=None)
@click.option("--monitors", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--gateway", default=None, help="host:port of a running gateway arm.")
@click.option("--refioc", default=None, help="host:port of a running reference IOC.")
@click.option("--pvlist", type=click.Path(exists=True), default=None,
              help="PV list served by externally started arms.")
@click.option("--drop-event-at", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@verbose_opt
def pvbench_run(scenario, config_path, records, duration, monitors, seed, gateway, refioc, pvlist,
                drop_event_at, out, verbose):
    _setup_logging(verbose)
    overrides = dict(scenario=scenario, record_count=records, duration_s=duration, monitor_count=monitors,
                     seed=seed, drop_event_at=drop_event_at, out=Path(out) if out else None)
    if config_path:
        cfg = bench.load_scenario(config_path, **overrides)
    else:
        cfg = bench.ScenarioConfig(**{k: v for k, v in overrides.items() if v is not None})
    if monitors is not None:
        cfg.monitor_sweep = (monitors,)
    if (gateway or refioc) and not pvlist and cfg.scenario != "scale":
        raise click.UsageError("--pvlist is required with externally started arms")
    summary = asyncio.run(bench.run_scenario(cfg, gateway, refioc, pvlist))
    click.echo(json.dumps(summary, indent=2, default=str))


@click.group()
def main():
    """pvbridge tools."""


for _name, _group in (("pvup", pvup), ("pvgw", pvgw), ("pvioc", pvioc), ("pvarc", pvarc), ("pvbench", pvbench)):
    main.add_command(_group, _name)
