use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use nalgebra::{Matrix2, Vector2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use atc::atomistic::AtomisticSystem;
use atc::continuum::{build_mesh, ContinuumSystem, FEField, NodeTag};
use atc::coupling::{solve_atc, AtcOpts, AtcProblem};
use atc::geometry::{
    build_domains, lattice_sets, stencil, DomainTag, InteractionRange, LatticeField,
};
use atc::potential::{site_energy, CauchyBornDensity, PairPotentialSpec, SiteModel};
use atc::study::{fit_slope, run_convergence_study, RowStatus, StudyConfig};
use atc::{AtcError, Result};

#[derive(Parser)]
#[command(name = "atc", about = "Optimization-based atomistic-to-continuum coupling studies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a convergence study; writes study.csv and study.dat into --out.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the quick invariant and finite-difference suite.
    Check,
    /// Build the mesh for the first ladder entry and dump its listing.
    Mesh {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dump: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Study { config, out } => cmd_study(&config, &out),
        Cmd::Check => cmd_check(),
        Cmd::Mesh { config, dump } => cmd_mesh(&config, &dump),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AtcError::Config(_) | AtcError::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn cmd_study(config: &PathBuf, out: &PathBuf) -> Result<()> {
    let cfg = StudyConfig::load(config)?;
    let rows = run_convergence_study(&cfg, out)?;
    for r in &rows {
        println!(
            "R_core {:>3}  r_c {:>4}  J* {:>12.5e}  broken {:>12.5e}  continuum {:>12.5e}  [{}]",
            r.r_core, r.r_c, r.j_star, r.broken_error, r.continuum_error, r.status
        );
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.status == RowStatus::Ok && r.broken_error > 0.0)
        .map(|r| (r.r_core as f64, r.broken_error))
        .collect();
    if pts.len() >= 3 {
        let (slope, _, r2) = fit_slope(&pts, true)?;
        println!("broken-error slope vs R_core: {slope:.3} (R² {r2:.4})");
    }
    if rows.iter().any(|r| r.status != RowStatus::Ok) {
        return Err(AtcError::NonConvergence {
            iterations: 0,
            residual: f64::NAN,
        });
    }
    println!("wrote {}", out.join("study.csv").display());
    Ok(())
}

fn cmd_mesh(config: &PathBuf, dump: &PathBuf) -> Result<()> {
    let cfg = StudyConfig::load(config)?;
    let geoms = cfg.validate()?;
    let mesh = build_mesh(&geoms[0], cfg.mesh.grading_exponent, cfg.mesh.beta_min_deg)?;
    let mut w = BufWriter::new(File::create(dump)?);
    mesh.dump(&mut w)?;
    println!(
        "R_core {}: {} nodes, {} triangles, min angle {:.2}°",
        geoms[0].r_core,
        mesh.n_nodes(),
        mesh.n_triangles(),
        mesh.min_angle_deg
    );
    Ok(())
}

fn fail(name: &str, detail: String) -> Result<()> {
    println!("check {name}: FAILED ({detail})");
    Err(AtcError::Constraint(format!("check {name} failed: {detail}")))
}

fn cmd_check() -> Result<()> {
    let mut rng = StdRng::seed_from_u64(0);
    let range = InteractionRange::nn_nnn();

    // strain-energy density identity: per-site energy of an affine field
    // equals the continuum density at the same gradient
    let model = SiteModel::homogeneous(range.clone(), PairPotentialSpec::default());
    let cb = CauchyBornDensity::from_model(&model);
    let lattice = Arc::new(atc::geometry::LatticeIndex::from_box(-4, 4, &range));
    for _ in 0..10 {
        let g = Matrix2::from_fn(|_, _| 0.05 * (rng.random::<f64>() - 0.5));
        let u = LatticeField::affine(lattice.clone(), &g);
        let du = stencil(&u, &range, [0, 0])?;
        let e = site_energy(&model, [0, 0], &du);
        let w = cb.energy(&g);
        let rel = (e - w).abs() / w.abs().max(1e-300);
        if rel > 1e-12 {
            return fail("density-identity", format!("relative error {rel:e}"));
        }
    }
    println!("check density-identity: ok");

    let geom = build_domains(6, 4, 1, range.clone())?;

    // patch test: affine FE field has zero interior residual
    {
        let mesh = Arc::new(build_mesh(&geom, 1.5, 20.0)?);
        let csys = ContinuumSystem::new(mesh.clone(), CauchyBornDensity::from_model(&model));
        let g = Matrix2::new(0.013, -0.004, 0.006, 0.021);
        let u = FEField::affine(mesh.clone(), &g);
        let res = csys.nodal_residual(&u);
        for (n, r) in res.iter().enumerate() {
            if mesh.tags[n] == NodeTag::Interior && r.norm() > 1e-10 {
                return fail("patch-test", format!("residual {:e} at node {n}", r.norm()));
            }
        }
        println!("check patch-test: ok");
    }

    // atomistic gradient vs central finite differences at a random state
    {
        let model = Arc::new(SiteModel::default_defect());
        let lattice = Arc::new(lattice_sets(&geom, DomainTag::Atomistic));
        let sys = AtomisticSystem::new(lattice.clone(), model);
        let mut u = LatticeField::zeros(lattice);
        for v in u.values.iter_mut() {
            *v = Vector2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 1e-2;
        }
        let grad = sys.gradient(&u);
        let h = 1e-6;
        for _ in 0..20 {
            let b = rng.random_range(0..sys.n_free());
            let c = rng.random_range(0..2usize);
            let ord = sys.free_sites()[b] as usize;
            let keep = u.values[ord][c];
            u.values[ord][c] = keep + h;
            let ep = sys.energy(&u);
            u.values[ord][c] = keep - h;
            let em = sys.energy(&u);
            u.values[ord][c] = keep;
            let fd = (ep - em) / (2.0 * h);
            let rel = (grad[2 * b + c] - fd).abs() / fd.abs().max(1e-8);
            if rel > 1e-6 {
                return fail("gradient-fd", format!("dof ({b},{c}) relative error {rel:e}"));
            }
        }
        println!("check gradient-fd: ok");
    }

    // homogeneous model: zero controls are already optimal, J = 0
    {
        let model = Arc::new(SiteModel::homogeneous(range, PairPotentialSpec::default()));
        let problem = AtcProblem::new(geom, model, 1.5, 20.0)?;
        let state = solve_atc(&problem, None, &AtcOpts::default())?;
        if state.iterations != 0 || state.j != 0.0 {
            return fail(
                "homogeneous-coupling",
                format!("iterations {}, J {:e}", state.iterations, state.j),
            );
        }
        println!("check homogeneous-coupling: ok");
    }

    println!("all checks passed");
    Ok(())
}
