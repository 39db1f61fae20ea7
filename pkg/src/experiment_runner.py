"""
Experiment Runner - orchestration of one command-line run

Features:
- Timestamped run directory with a manifest (config hash, versions, wall times, artifacts)
- One handler per subcommand, each a sequence of named stages
- Stage failures wrapped into StageFailure with the stage name
- Deterministic CSV output for a fixed config and seed
- Worker count handed down to the services that run in parallel
"""

import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import scipy

from config import CARLEMAN_SAMPLES, CARLEMAN_TAU_LIST, CGO_TAU_LIST, PHANTOMS, RT_ANGLES, RT_CENTERS, WORKERS
from models.records import CgoConfig, Sinogram
from models.run_config import RunConfig
from services import carleman, cgo, exterior_calculus, forward_solver, geometry, ray_transform, recovery
from services.exterior_calculus import calculus_for, interior, pointwise_inner, wedge
from services.reduction import factorization_residual, materials_from_spec
from utils import expressions
from utils.errors import ConfigInvalid, InverseProblemError, PreconditionError, StageFailure
from utils.field_io import file_sha256, read_csv, read_field, write_csv, write_field, write_json

logger = logging.getLogger(__name__)

SUBCOMMANDS = (
    "calc verify", "forward solve", "cgo build", "cgo sweep", "carleman scan",
    "rt forward", "rt invert", "rt roundtrip", "reconstruct run", "report",
)


class ExperimentRunner:
    """
    Runs one subcommand against a validated RunConfig.

    Every artifact is written below a fresh run directory and listed in
    manifest.json with its sha256, so a run can be audited or compared
    byte for byte with a rerun.
    """

    def __init__(self, config: RunConfig, workers: int = WORKERS, run_dir: Optional[str] = None,
                 report_source: Optional[str] = None):
        """
        Initialize the runner.

        Args:
            config: Validated run configuration (flags already applied)
            workers: Worker threads handed to sweeps and batches
            run_dir: Explicit run directory; default is a timestamped one under config.out
            report_source: Finished run directory summarised by the report subcommand
        """
        self.config = config
        self.workers = max(1, int(workers))
        self.tol = config.tolerances
        self.timings: Dict[str, float] = {}
        self.artifacts: List[Path] = []
        self.report_source = Path(report_source) if report_source else Path(config.out)
        self._setup_run_directory(run_dir)

    def _setup_run_directory(self, run_dir: Optional[str]) -> None:
        """Create the run directory, adding a suffix when the timestamp is taken."""
        if run_dir is not None:
            self.run_dir = Path(run_dir)
        else:
            stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
            base = Path(self.config.out) / stamp
            candidate, k = base, 1
            while candidate.exists():
                candidate = Path(f"{base}-{k}")
                k += 1
            self.run_dir = candidate
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def _display_startup_banner(self, subcommand: str) -> None:
        logger.info("=" * 75)
        logger.info(f"🚀 {subcommand}")
        logger.info(f"   Config:  {self.config.source or '<inline>'}")
        logger.info(f"   Chart:   {self.config.chart.get('surface', 'log_polar_ball' if 'log_polar_ball' in self.config.chart else 'flat_disc')} "
                    f"{self.config.chart.get('shape')}")
        logger.info(f"   Seed:    {self.config.seed}    Workers: {self.workers}")
        logger.info(f"   Output:  {self.run_dir}")
        logger.info("=" * 75)

    # ------------------------------------------------------------------
    # Plumbing
    # ------------------------------------------------------------------

    @contextmanager
    def stage(self, name: str):
        """Time a stage; service errors leave it as StageFailure(name)."""
        start = time.perf_counter()
        logger.info(f"🔄 {name}")
        try:
            yield
        except (StageFailure, ConfigInvalid):
            raise
        except InverseProblemError as e:
            logger.error(f"Stage '{name}' failed: {e}")
            raise StageFailure(name, e) from e
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def _csv(self, name: str, rows, columns=None) -> Path:
        path = write_csv(self.run_dir / name, rows, columns)
        self.artifacts.append(path)
        return path

    def _json(self, name: str, payload) -> Path:
        path = write_json(self.run_dir / name, payload)
        self.artifacts.append(path)
        return path

    def _field(self, name: str, values, chart_hash: Optional[str] = None, **extra) -> Path:
        path = write_field(self.run_dir / name, values, chart_hash=chart_hash, extra=extra or None)
        self.artifacts.extend([path, path.with_suffix(path.suffix + ".json")])
        return path

    def config_hash(self) -> str:
        text = json.dumps(self.config.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def write_manifest(self, subcommand: str, status: str, error: Optional[str] = None) -> Path:
        manifest = {
            "subcommand": subcommand,
            "status": status,
            "error": error,
            "config_sha256": self.config_hash(),
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "workers": self.workers,
            "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
            "wall_times": self.timings,
            "artifacts": [{"path": p.name, "sha256": file_sha256(p)} for p in self.artifacts if p.exists()],
            "created": datetime.now().isoformat(timespec="seconds"),
        }
        return write_json(self.run_dir / "manifest.json", manifest)

    def _chart(self):
        return geometry.build_chart(self.config.chart)

    def _materials(self, name: str, chart):
        return materials_from_spec(self.config.material(name), chart)

    # ------------------------------------------------------------------
    # Entry point
    # ------------------------------------------------------------------

    def run(self, subcommand: str) -> Path:
        """
        Execute a subcommand and write the manifest.

        Returns:
            The run directory

        Raises:
            ConfigInvalid: for unknown subcommands or config problems
            StageFailure: naming the stage that failed
        """
        handlers: Dict[str, Callable[[], None]] = {
            "calc verify": self.calc_verify,
            "forward solve": self.forward_solve,
            "cgo build": self.cgo_build,
            "cgo sweep": self.cgo_sweep,
            "carleman scan": self.carleman_scan,
            "rt forward": self.rt_forward,
            "rt invert": self.rt_invert,
            "rt roundtrip": self.rt_roundtrip,
            "reconstruct run": self.reconstruct_run,
            "report": self.report,
        }
        if subcommand not in handlers:
            raise ConfigInvalid(f"unknown subcommand '{subcommand}' (available: {', '.join(SUBCOMMANDS)})")

        self._display_startup_banner(subcommand)
        try:
            handlers[subcommand]()
        except StageFailure as e:
            self.write_manifest(subcommand, "failed", f"{e.stage}: {e.cause}")
            raise
        self.write_manifest(subcommand, "ok")
        logger.info(f"✅ {subcommand} finished, {len(self.artifacts)} artifacts in {self.run_dir}")
        return self.run_dir

    # ------------------------------------------------------------------
    # calc verify
    # ------------------------------------------------------------------

    def calc_verify(self) -> None:
        """Operator identities and integration-by-parts defects on seeded random forms."""
        with self.stage("chart"):
            chart = self._chart()
            calc = calculus_for(chart)
        with self.stage("identities"):
            seed = self.config.seed
            U = carleman.random_smooth_form(seed, chart)
            V = carleman.random_smooth_form(seed + 1, chart)
            rng = np.random.default_rng(seed)
            xi = rng.standard_normal((3,) + chart.shape)
            norm_u = calc.norm(U) or 1.0
            tol = self.tol["identity"]

            dd = calc.norm(exterior_calculus.exterior_d(exterior_calculus.exterior_d(U, chart), chart))
            dd_scale = calc.norm(exterior_calculus.exterior_d(U, chart)) or 1.0
            deldel = calc.norm(exterior_calculus.codifferential(exterior_calculus.codifferential(U, chart), chart))
            deldel_scale = calc.norm(exterior_calculus.codifferential(U, chart)) or 1.0
            starstar = calc.norm(exterior_calculus.hodge_star(exterior_calculus.hodge_star(U, chart), chart) - U)
            lhs = np.sum(pointwise_inner(wedge(xi, U), V))
            rhs = np.sum(pointwise_inner(U, interior(xi, V)))
            rows = [
                {"identity": "d_d", "relative_residual": dd / dd_scale, "tolerance": tol},
                {"identity": "delta_delta", "relative_residual": deldel / deldel_scale, "tolerance": tol},
                {"identity": "star_star", "relative_residual": starstar / norm_u, "tolerance": tol},
                {"identity": "wedge_interior_adjoint",
                 "relative_residual": abs(lhs - rhs) / max(abs(lhs), 1e-300), "tolerance": tol},
            ]
            scale = norm_u * (calc.norm(V) or 1.0)
            rows.append({"identity": "integration_by_parts",
                         "relative_residual": exterior_calculus.ibp_residual(U, V, chart) / scale,
                         "tolerance": float("nan")})
            rows.append({"identity": "dirac_boundary",
                         "relative_residual": exterior_calculus.dirac_boundary_defect(U, V, chart) / scale,
                         "tolerance": float("nan")})
            for row in rows:
                row["passed"] = bool(row["relative_residual"] <= row["tolerance"]) if np.isfinite(row["tolerance"]) else True

        if "m1" in self.config.materials:
            with self.stage("factorizations"):
                m = self._materials("m1", chart)
                q, qp, qhat = factorization_residual(m, U, chart)
                rows.extend({"identity": name, "relative_residual": value, "tolerance": float("nan"), "passed": True}
                            for name, value in (("factor_Q", q), ("factor_Qprime", qp), ("factor_Qhat", qhat)))

        self._csv("identities.csv", rows, ["identity", "relative_residual", "tolerance", "passed"])
        failed = [r["identity"] for r in rows if not r["passed"]]
        if failed:
            logger.warning(f"⚠️ Identities above tolerance: {', '.join(failed)}")
        else:
            logger.info("✅ All exact identities within tolerance")

    # ------------------------------------------------------------------
    # forward solve
    # ------------------------------------------------------------------

    def forward_solve(self) -> None:
        """Partial Cauchy data for the front-face complement as input and F1 complement as output."""
        section = self.config.section("forward")
        with self.stage("setup"):
            chart = self._chart()
            m = self._materials(section.get("material", "m1"), chart)
            regions = geometry.boundary_regions(chart)
            inputs = regions.front.complement
            outputs = regions.gamma
            basis = forward_solver.trace_basis(chart, inputs, int(section.get("modes", 4)))
        with self.stage("solve"):
            solver = forward_solver.MaxwellSolver(m, chart, tol=self.tol["solver"],
                                                  threshold=self.tol["near_resonance"])
            records = forward_solver.admittance(m, inputs, outputs, basis, chart, solver=solver)
            E, H, report = solver.solve(basis[0])
        with self.stage("write"):
            self._csv("cauchy_records.csv", [
                {"mode": i, "input_max": r.f.max_abs(), "output_max": r.output.max_abs(), **r.report.to_dict()}
                for i, r in enumerate(records)])
            self._field("E_mode0.bin", E, chart.chart_hash)
            self._field("H_mode0.bin", H, chart.chart_hash)
            self._json("forward.json", {"omega": solver.omega, "perturbed": solver.perturbed,
                                        "conditioning": solver.conditioning, "report": report.to_dict()})
        if "omegas" in section:
            with self.stage("resonance"):
                curve = forward_solver.resonance_probe(m, section["omegas"], chart,
                                                       threshold=self.tol["near_resonance"])
                self._csv("resonance.csv", curve.to_rows())

    # ------------------------------------------------------------------
    # CGO
    # ------------------------------------------------------------------

    def _cgo_setup(self):
        section = self.config.section("cgo")
        chart = self._chart()
        m = self._materials(section.get("material", "m1"), chart)
        if not chart.is_conformally_flat:
            chart, m = geometry.rescale_materials(chart, m)
        gamma = geometry.boundary_regions(chart).gamma
        b = tuple(complex(*c) if isinstance(c, (list, tuple)) else complex(c) for c in section.get("b", [1.0]))
        return section, chart, m, gamma, b

    def cgo_build(self) -> None:
        """One type a and one type b CGO at the configured tau, plus amplitude residuals."""
        with self.stage("setup"):
            section, chart, m, gamma, b = self._cgo_setup()
            tau = float(section.get("tau", CGO_TAU_LIST[0]))
            b_r = tuple(complex(*c) if isinstance(c, (list, tuple)) else complex(c) for c in section.get("b_r", [1.0]))
            cfg_a = CgoConfig(tau=tau, lam=float(section.get("lambda", 1.0)), b=b, b_r=b_r)
            cfg_b = CgoConfig(tau=tau, s0=float(section.get("s0", 1.0)), t0=float(section.get("t0", 0.0)),
                              b=b, flavor="b")
        with self.stage("amplitudes"):
            eik, trans, trans_r, trans_th = cgo.eikonal_transport_residuals(chart, cfg_a)
        with self.stage("pair"):
            pair = cgo.build_cgo_pair(m, m, cfg_a, cfg_b, gamma, chart, mode=section.get("mode", "solver"))
        with self.stage("write"):
            self._csv("cgo_reports.csv", [r.to_row() for r in pair.reports.values()])
            self._json("cgo.json", {"config_a": cfg_a.to_dict(), "config_b": cfg_b.to_dict(),
                                    "eikonal": eik, "transport": [trans, trans_r, trans_th],
                                    "y_residual": pair.y_residual, "y_boundary_trace": pair.y_boundary_trace})
            self._field("z1.bin", pair.z1.data, chart.chart_hash, frame_storage="graded")
            self._field("y.bin", pair.y.data, chart.chart_hash, frame_storage="graded")

    def cgo_sweep(self) -> None:
        """Remainder decay over the tau list for both flavors."""
        with self.stage("setup"):
            section, chart, m, gamma, b = self._cgo_setup()
            taus = [float(t) for t in section.get("taus", CGO_TAU_LIST)]
            lam = float(section.get("lambda", 1.0))
        rows, slopes = [], {}
        for flavor in section.get("flavors", ["a", "b"]):
            with self.stage(f"sweep_{flavor}"):
                cfg = CgoConfig(tau=taus[0], lam=lam if flavor == "a" else 0.0, b=b, flavor=flavor)
                sweep = cgo.cgo_sweep(cfg, m, gamma if flavor == "b" else None, chart, taus,
                                      workers=self.workers, bound=self.tol["resolution"])
                rows.extend(sweep.to_rows())
                slopes[flavor] = sweep.slope
        self._csv("cgo_sweep.csv", rows)
        self._json("cgo_sweep.json", {"slopes": slopes})

    # ------------------------------------------------------------------
    # Carleman
    # ------------------------------------------------------------------

    def carleman_scan(self) -> None:
        """Sampled Carleman ratios and the stability verdict."""
        section = self.config.section("carleman")
        with self.stage("setup"):
            chart = self._chart()
            m = self._materials(section.get("material", "m1"), chart)
            gamma = geometry.boundary_regions(chart).gamma
        with self.stage("scan"):
            scan = carleman.carleman_scan(int(section.get("samples", CARLEMAN_SAMPLES)),
                                          [float(t) for t in section.get("taus", CARLEMAN_TAU_LIST)],
                                          m, gamma, chart, family=section.get("family", "interior"),
                                          seed=self.config.seed, workers=self.workers,
                                          stability_bound=self.tol["carleman_stability"])
        self._csv("carleman_samples.csv", [s.to_row() for s in scan.samples])
        self._json("carleman.json", {"fitted_c": scan.fitted_c, "stability": scan.stability,
                                     "verdict": scan.verdict, "term_slopes": scan.term_slopes})

    # ------------------------------------------------------------------
    # Ray transform
    # ------------------------------------------------------------------

    def _rt_geometry(self):
        section = self.config.section("raytransform")
        geom = ray_transform.build_ray_geometry(
            surface=section.get("surface", "flat_disc"), n=int(section.get("n", 64)),
            n_centers=int(section.get("centers", RT_CENTERS)), n_angles=int(section.get("angles", RT_ANGLES)),
            cap_radius=float(section.get("cap_radius", 1.0)), workers=self.workers)
        return section, geom

    def _phantom(self, section: Dict, geom) -> np.ndarray:
        name = section.get("phantom", "gaussian")
        expr = PHANTOMS.get(name, name)
        X, Y = np.meshgrid(geom.grid, geom.grid, indexing="ij")
        return expressions.evaluate(expr, {"x": X, "y": Y}).real * geom.mask

    def rt_forward(self) -> None:
        with self.stage("geometry"):
            section, geom = self._rt_geometry()
        with self.stage("forward"):
            f = self._phantom(section, geom)
            sino = ray_transform.attenuated_ray_transform(f, section.get("lambdas", [0.5]), geom,
                                                          internal=bool(section.get("internal", False)))
        self._field("sinogram.bin", sino.values, sinogram=sino.to_dict())
        self._field("phantom.bin", f)
        self._json("sinogram.json", sino.to_dict())

    def _load_sinogram(self, section: Dict, geom):
        path = section.get("sinogram_file")
        if path is None:
            raise ConfigInvalid("rt invert needs raytransform.sinogram_file (written by rt forward)")
        values, meta = read_field(path)
        info = meta.get("sinogram", {})
        lambdas = np.asarray(info.get("lambdas", section.get("lambdas", [0.5])), dtype=float)
        if values.shape != geom.angles.shape + (lambdas.size,):
            raise ConfigInvalid(f"sinogram shape {values.shape} does not fit the configured ray geometry")
        if not np.any(values.imag):
            values = values.real
        return Sinogram(values=values, centers=geom.centers, angles=geom.angles, lambdas=lambdas,
                         step=geom.step, lengths=geom.lengths, surface=geom.surface)

    def _invert(self, section: Dict, geom, sino) -> np.ndarray:
        lam = float(section.get("invert_lambda", sino.lambdas[0]))
        result = ray_transform.invert_ray_transform(sino, lam, geom, reg=float(section.get("reg", 1e-3)),
                                                    tol=self.tol["cg"])
        self._field("reconstruction.bin", result.field)
        self._json("inversion.json", {"lambda": lam, "data_residual": result.data_residual,
                                      "iterations": result.iterations, "reg_effective": result.reg_effective})
        return result.field

    def rt_invert(self) -> None:
        with self.stage("geometry"):
            section, geom = self._rt_geometry()
        with self.stage("invert"):
            self._invert(section, geom, self._load_sinogram(section, geom))

    def rt_roundtrip(self) -> None:
        """Forward, adjoint test and inversion of a phantom; relative L2 error in the disc."""
        with self.stage("geometry"):
            section, geom = self._rt_geometry()
        with self.stage("forward"):
            f = self._phantom(section, geom)
            sino = ray_transform.attenuated_ray_transform(f, section.get("lambdas", [0.5]), geom)
        with self.stage("adjoint_test"):
            rng = np.random.default_rng(self.config.seed)
            lam = float(sino.lambdas[0])
            g = rng.standard_normal(geom.angles.shape + (sino.lambdas.size,))
            lhs = np.vdot(sino.values[..., 0], g[..., 0])
            back = ray_transform.adjoint_ray_transform(sino.with_values(g), lam, geom)
            rhs = np.vdot(f, back)
            adjoint_gap = float(abs(lhs - rhs) / max(abs(lhs), 1e-300))
        with self.stage("invert"):
            rec = self._invert(section, geom, sino)
        mask = geom.mask
        error = float(np.linalg.norm((rec - f)[mask]) / np.linalg.norm(f[mask]))
        self._csv("roundtrip.csv", [{"lambda": lam, "adjoint_gap": adjoint_gap, "relative_l2_error": error}])
        logger.info(f"{'✅' if error <= 0.05 else '⚠️'} Round trip: relative L2 error {error:.3%}, "
                    f"adjoint gap {adjoint_gap:.1e}")

    # ------------------------------------------------------------------
    # Reconstruction
    # ------------------------------------------------------------------

    def reconstruct_run(self) -> None:
        """Full pipeline; StageFailure from recovery keeps its stage name."""
        options = self.config.section("recovery")
        options.setdefault("workers", self.workers)
        options.setdefault("threshold_factor", self.tol["threshold_factor"])
        if "log_polar_ball" in self.config.chart:
            with self.stage("front_face_check"):
                self._check_ball_front_face()
        report = recovery.reconstruct_pipeline(self.config.material("m1"), self.config.material("m2"),
                                               self.config.chart, options)
        self.timings.update({k[5:]: v for k, v in report.metrics.items() if k.startswith("time_")})
        self._json("recovery.json", report.to_dict())
        self._csv("recovery_metrics.csv", [{"metric": k, "value": v} for k, v in sorted(report.metrics.items())
                                           if not k.startswith("time_")])
        self._field("q_alpha.bin", report.q_alpha)
        self._field("q_beta.bin", report.q_beta)
        if report.eps_hat is not None:
            self._field("eps_hat.bin", report.eps_hat)
            self._field("mu_hat.bin", report.mu_hat)

    def _check_ball_front_face(self) -> None:
        """F(x0) of the ball against the pointwise sign of x . nu."""
        ball = self.config.chart["log_polar_ball"]
        chart, domain = geometry.log_polar_euclidean_chart(ball["center"], float(ball["radius"]),
                                                           self.config.chart["shape"],
                                                           int(ball.get("orientation", -1)))
        ff = geometry.front_face(chart, domain)
        x, y, z = chart.embedding.to_physical(*chart.mesh())
        boundary = ff.front.mask | ff.complement.mask
        normal = ff.front.normal
        oracle = boundary & (x * normal[0] + y * normal[1] + z * normal[2] <= 0)
        mismatches = int(np.count_nonzero(oracle != ff.front.mask))
        self._csv("front_face.csv", [{"boundary_samples": int(boundary.sum()), "front_samples": ff.front.count,
                                      "mismatches": mismatches}])
        if mismatches:
            raise PreconditionError(f"front face differs from F(x0) at {mismatches} samples")

    # ------------------------------------------------------------------
    # report
    # ------------------------------------------------------------------

    def report(self) -> None:
        """Check the artifacts of a finished run against its manifest."""
        source = self.report_source
        manifest_path = source / "manifest.json"
        if not manifest_path.exists():
            raise ConfigInvalid(f"no manifest.json in {source}")
        manifest = json.loads(manifest_path.read_text())
        rows = []
        for entry in manifest.get("artifacts", []):
            path = source / entry["path"]
            row = {"artifact": entry["path"], "sha256_ok": path.exists() and file_sha256(path) == entry["sha256"]}
            if path.suffix == ".csv" and path.exists():
                row["rows"] = len(read_csv(path))
            rows.append(row)
        self._csv("report.csv", rows, ["artifact", "sha256_ok", "rows"])
        self._json("report.json", {"source": str(source), "subcommand": manifest.get("subcommand"),
                                   "status": manifest.get("status"), "wall_times": manifest.get("wall_times", {})})
        logger.info(f"📚 {source}: {manifest.get('subcommand')} ({manifest.get('status')}), "
                    f"{len(rows)} artifacts, {sum(not r['sha256_ok'] for r in rows)} modified")
