"""Command-line pipeline: infer, confirm, synthesize, enact, verify.

Exit codes:

* 0 success (and, for ``verify``, a conformant trace)
* 1 parse, configuration, wiring or missing-input error
* 2 unsatisfiable adaptation
* 3 unresolved ambiguity
* 4 conformance violations
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, TextIO

from .enactment import (
    Trace,
    build_harness,
    check_conformance,
    enact,
    load_scenario,
    make_stubs,
)
from .errors import AdaptError, AmbiguityError, UnsatisfiableAdaptationError
from .hints import CONFIRM, Endpoint, Hint, HintSet, parse_hints
from .mapping import InterfaceSpec, MappingReport, canonical_json, infer_mappings, load_interface
from .protocol import ChoreographySpec, ProtocolSpec, load_choreography, load_protocol
from .schema import MessageSchema, parse_schema_json, parse_xsd_subset
from .synthesis import AdapterSpec, CDSpec, emit_adapter, merged_view, synthesize_adapter, synthesize_cds

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNSATISFIABLE = 2
EXIT_AMBIGUOUS = 3
EXIT_VIOLATIONS = 4

log = logging.getLogger("eipadapt")


@dataclass
class ServiceEntry:
    role: str
    interface: Path
    protocol: Path


@dataclass
class ProjectConfig:
    root: Path
    choreography: Path
    services: list[ServiceEntry]
    out: Path
    hints: Path | None = None
    scenarios: dict[str, Path] = field(default_factory=dict)
    scenario: str | None = None
    seed: int = 0
    max_ticks: int = 10_000

    @classmethod
    def load(cls, path: Path | str) -> "ProjectConfig":
        path = Path(path)
        if not path.is_file():
            raise AdaptError(f"config file {path} not found")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise AdaptError(f"{path}: {exc.msg} (line {exc.lineno})") from None
        root = path.parent
        services = [
            ServiceEntry(s["role"], root / s["interface"], root / s["protocol"]) for s in obj["services"]
        ]
        cfg = cls(
            root=root,
            choreography=root / obj["choreography"],
            services=services,
            out=root / obj.get("out", "out"),
            hints=root / obj["hints"] if obj.get("hints") else None,
            scenarios={k: root / v for k, v in obj.get("scenarios", {}).items()},
            scenario=obj.get("scenario"),
            seed=int(obj.get("seed", 0)),
            max_ticks=int(obj.get("maxTicks", 10_000)),
        )
        missing = [p for p in [cfg.choreography, *(s.interface for s in services), *(s.protocol for s in services)]
                   if not p.is_file()]
        if missing:
            raise AdaptError(f"referenced files not found: {', '.join(map(str, missing))}")
        return cfg

    def load_hints(self) -> HintSet:
        if self.hints is None or not self.hints.is_file():
            return HintSet()
        return parse_hints(self.hints.read_text(encoding="utf-8"))


@dataclass
class Project:
    """A loaded project: choreography, services, and the CDs they imply."""

    config: ProjectConfig
    choreo: ChoreographySpec
    interfaces: dict[str, InterfaceSpec]
    protocols: dict[str, ProtocolSpec]
    cds: list[CDSpec]

    @classmethod
    def load(cls, cfg: ProjectConfig) -> "Project":
        choreo = load_choreography(cfg.choreography)
        interfaces, protocols = {}, {}
        for s in cfg.services:
            iface = load_interface(s.interface)
            interfaces[s.role] = iface
            protocols[s.role] = load_protocol(s.protocol, iface.service_name)
        return cls(cfg, choreo, interfaces, protocols, synthesize_cds(choreo))

    def registry(self) -> dict[str, MessageSchema]:
        reg: dict[str, MessageSchema] = {}
        for iface in self.interfaces.values():
            reg.update((r.qname, r.schema) for r in iface.messages())
        for cd in self.cds:
            reg.update(cd.schemas)
        return reg

    def roles(self) -> list[str]:
        return sorted(self.interfaces)

    def cds_of(self, role: str) -> list[CDSpec]:
        return sorted((cd for cd in self.cds if role in cd.role_pair), key=lambda c: c.id)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _report_path(cfg: ProjectConfig, service: str) -> Path:
    return cfg.out / "reports" / f"{service}.json"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_parse(args: argparse.Namespace, out: TextIO) -> int:
    path = Path(args.file)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".xsd":
        schemas = parse_xsd_subset(text, args.qname)
    else:
        schemas = parse_schema_json(text)
    for schema in schemas:
        print(schema.qname, file=out)
        for leaf, kind in schema.leaves():
            print(f"  {leaf}: {kind}", file=out)
    return EXIT_OK


def cmd_infer(cfg: ProjectConfig, out: TextIO) -> int:
    project = Project.load(cfg)
    hints = cfg.load_hints()
    code = EXIT_OK
    for role in project.roles():
        iface = project.interfaces[role]
        log.info("inferring mappings for %s against %d CDs", iface.service_name, len(project.cds_of(role)))
        report = infer_mappings(iface, merged_view(role, project.cds_of(role)), hints)
        _write(_report_path(cfg, iface.service_name), report.dumps())
        live = len(report.live_mappings)
        print(f"{iface.service_name}: {live} mappings, {len(report.unmapped)} unmapped", file=out)
        for amb in report.ambiguities:
            print(amb.describe(), file=out)
            code = EXIT_AMBIGUOUS
    if code == EXIT_AMBIGUOUS:
        print("ambiguities remain: run `confirm` or add hints, then infer again", file=out)
    return code


def _load_reports(cfg: ProjectConfig, project: Project) -> dict[str, MappingReport]:
    reports = {}
    for role in project.roles():
        path = _report_path(cfg, project.interfaces[role].service_name)
        if not path.is_file():
            raise AdaptError(f"mapping report {path} is missing; run `infer` first")
        reports[role] = MappingReport.from_json(json.loads(path.read_text(encoding="utf-8")))
    return reports


def cmd_confirm(cfg: ProjectConfig, out: TextIO, inp: TextIO) -> int:
    """Walk through the ambiguities and record the chosen alternatives as hints."""
    project = Project.load(cfg)
    reports = _load_reports(cfg, project)
    chosen: list[Hint] = []
    for role in project.roles():
        for amb in reports[role].ambiguities:
            print(amb.describe(), file=out)
            print(f"choose 1-{len(amb.options)}, or s to skip: ", end="", file=out)
            line = inp.readline()
            if not line:
                break
            answer = line.strip()
            if not answer.isdigit() or not 1 <= int(answer) <= len(amb.options):
                print("skipped", file=out)
                continue
            for choice in amb.options[int(answer) - 1]:
                for c in choice.pairs:
                    chosen.append(Hint(Endpoint(choice.sub, str(c.source)), Endpoint(choice.sup, str(c.target)), CONFIRM))
    target = cfg.hints or cfg.root / "hints.txt"
    merged = cfg.load_hints().merged(HintSet(chosen))
    _write(target, merged.render())
    print(f"wrote {len(merged)} hints to {target}; run `infer` again", file=out)
    return EXIT_OK


def synthesize_project(project: Project, reports: dict[str, MappingReport]) -> tuple[list[AdapterSpec], dict[str, Any]]:
    adapters = []
    attachments = []
    for role in project.roles():
        iface = project.interfaces[role]
        mine = project.cds_of(role)
        for index, cd in enumerate(mine):
            spec = synthesize_adapter(reports[role], iface, project.protocols[role], cd, role, index == 0, mine)
            adapters.append(spec)
            attachments.append({
                "role": role,
                "service": iface.service_name,
                "cd": cd.id,
                "adapter": spec.id if spec.needed else None,
                "direct": None if spec.needed else spec.to_json(),
            })
    return adapters, {"attachments": attachments, "cds": [cd.id for cd in project.cds]}


def cmd_synthesize(cfg: ProjectConfig, out: TextIO) -> int:
    project = Project.load(cfg)
    reports = _load_reports(cfg, project)
    adapters, wiring = synthesize_project(project, reports)
    registry = project.registry()
    lines = []
    for cd in project.cds:
        _write(cfg.out / "cds" / f"{cd.id}.json", canonical_json(cd.to_json()))
    written = 0
    for spec in adapters:
        log.info("emitting %s", spec.id)
        artifact, report = emit_adapter(spec, registry)
        if spec.needed:
            _write(cfg.out / "adapters" / f"{spec.id}.json", artifact)
            written += 1
            lines.append(f"== {spec.id} ==\n{report}")
    _write(cfg.out / "wiring.json", canonical_json(wiring))
    _write(cfg.out / "synthesis-report.txt", "".join(lines))
    print(f"{len(project.cds)} coordination delegates, {written} adapters", file=out)
    for spec in adapters:
        if spec.needed:
            kinds = ", ".join(p.kind for d in spec.directions() for p in d.chain)
            print(f"  {spec.id}: [{kinds}]", file=out)
    return EXIT_OK


def load_artifacts(cfg: ProjectConfig) -> tuple[list[CDSpec], list[AdapterSpec]]:
    wiring_path = cfg.out / "wiring.json"
    if not wiring_path.is_file():
        raise AdaptError(f"{wiring_path} is missing; run `synthesize` first")
    wiring = json.loads(wiring_path.read_text(encoding="utf-8"))
    cds = []
    for cd_id in wiring["cds"]:
        path = cfg.out / "cds" / f"{cd_id}.json"
        if not path.is_file():
            raise AdaptError(f"{path} is missing; run `synthesize` first")
        cds.append(CDSpec.from_json(json.loads(path.read_text(encoding="utf-8"))))
    adapters = []
    for att in wiring["attachments"]:
        if att["adapter"] is not None:
            path = cfg.out / "adapters" / f"{att['adapter']}.json"
            if not path.is_file():
                raise AdaptError(f"{path} is missing; run `synthesize` first")
            adapters.append(AdapterSpec.from_json(json.loads(path.read_text(encoding="utf-8"))))
        else:
            adapters.append(AdapterSpec.from_json(att["direct"]))
    return cds, adapters


def run_scenario(cfg: ProjectConfig, scenario: str, bypass: bool) -> tuple[Project, Trace, Path]:
    project = Project.load(cfg)
    if scenario not in cfg.scenarios:
        raise AdaptError(f"unknown scenario {scenario!r}; known: {', '.join(sorted(cfg.scenarios))}")
    path = cfg.scenarios[scenario]
    if not path.is_file():
        raise AdaptError(f"scenario file {path} not found")
    scripts, reactions = load_scenario(path)
    cds, adapters = load_artifacts(cfg)
    services = {r: (project.interfaces[r], project.protocols[r]) for r in project.roles()}
    harness = build_harness(project.choreo, make_stubs(services, scripts, reactions), cds, adapters, cfg.seed, bypass)
    trace = enact(harness, cfg.max_ticks)
    suffix = "-bypass" if bypass else ""
    trace_path = cfg.out / "traces" / f"{scenario}{suffix}.jsonl"
    _write(trace_path, trace.dumps())
    return project, trace, trace_path


def _scenario_name(cfg: ProjectConfig, args: argparse.Namespace) -> str:
    name = args.scenario or cfg.scenario
    if name is None:
        raise AdaptError("no scenario selected; pass --scenario")
    return name


def cmd_enact(cfg: ProjectConfig, args: argparse.Namespace, out: TextIO) -> int:
    _, trace, path = run_scenario(cfg, _scenario_name(cfg, args), args.bypass_enforcement)
    counts: dict[str, int] = {}
    for e in trace.events[1:]:
        counts[e.kind] = counts.get(e.kind, 0) + 1
    summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "no events"
    status = "" if trace.complete else " (incomplete: tick budget exhausted)"
    print(f"trace written to {path}: {summary}{status}", file=out)
    return EXIT_OK


def cmd_verify(cfg: ProjectConfig, args: argparse.Namespace, out: TextIO) -> int:
    name = _scenario_name(cfg, args)
    project, trace, _ = run_scenario(cfg, name, args.bypass_enforcement)
    report = check_conformance(trace, project.choreo)
    suffix = "-bypass" if args.bypass_enforcement else ""
    _write(cfg.out / "conformance" / f"{name}{suffix}.json", canonical_json(report.to_json()))
    print(report.text(), end="", file=out)
    return EXIT_VIOLATIONS if report.violations else EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="project.json", help="project file (default: ./project.json)")
    common.add_argument("--out", help="output directory, overriding the project file")
    common.add_argument("--seed", type=int, help="scheduler seed, overriding the project file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="eipadapt", description="Mapping inference and adapter synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("parse", help="print the leaves of a schema file")
    p.add_argument("file")
    p.add_argument("--qname", default="Service.operation.message", help="qname for XSD input")
    sub.add_parser("infer", parents=[common], help="infer data mappings for every service")
    sub.add_parser("confirm", parents=[common], help="resolve ambiguities interactively into hints")
    sub.add_parser("synthesize", parents=[common], help="emit coordination delegates and adapters")
    for name, text in (("enact", "run a scenario and write its trace"),
                       ("verify", "run a scenario and check it against the choreography")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--scenario", help="scenario name from the project file")
        q.add_argument("--bypass-enforcement", action="store_true",
                       help="let coordination delegates forward everything")
        q.add_argument("--max-ticks", type=int, help="scheduler step budget")
    return parser


def _dispatch(args: argparse.Namespace, out: TextIO, inp: TextIO) -> int:
    if args.command == "parse":
        return cmd_parse(args, out)
    cfg = ProjectConfig.load(args.config)
    if args.out:
        cfg.out = Path(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "max_ticks", None):
        cfg.max_ticks = args.max_ticks
    commands: dict[str, Callable[[], int]] = {
        "infer": lambda: cmd_infer(cfg, out),
        "confirm": lambda: cmd_confirm(cfg, out, inp),
        "synthesize": lambda: cmd_synthesize(cfg, out),
        "enact": lambda: cmd_enact(cfg, args, out),
        "verify": lambda: cmd_verify(cfg, args, out),
    }
    return commands[args.command]()


def main(argv: list[str] | None = None, out: TextIO | None = None, inp: TextIO | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = out or sys.stdout
    err = sys.stderr
    try:
        return _dispatch(args, out, inp or sys.stdin)
    except UnsatisfiableAdaptationError as exc:
        print(f"error: unsatisfiable adaptation: {exc}", file=err)
        return EXIT_UNSATISFIABLE
    except AmbiguityError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_AMBIGUOUS
    except (AdaptError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
