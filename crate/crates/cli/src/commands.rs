use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hscnet_core::eval::{
    baseline_tree, build_scene_tree, evaluate, evaluate_frames, localize_frame, network_for_tree, training_points,
    EvalReport, RunConfig,
};
use hscnet_core::geometry::{pose_error, CameraIntrinsics, RigidPose};
use hscnet_core::hierarchy::{read_points, LabelTree};
use hscnet_core::network::{HscNet, HscNetConfig};
use hscnet_core::pose_solver::save_correspondence_dump;
use hscnet_core::scene_sim::{generate_dataset, load_split, read_frame, read_scene_file, Frame, RoomSpec, SceneFile, Split};
use hscnet_core::training::{check_tree, write_history_csv};

use crate::{BuildTreeArgs, Cli, Command, EvalArgs, Failure, GenSceneArgs, LocalizeArgs, ModelArgs, TrainArgs};

type Result<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenScene(a) => gen_scene(&a, cli.seed),
        Command::BuildTree(a) => build_tree(&a, &cfg, cli.seed),
        Command::Train(a) => train(&a, &cfg, cli.seed, false),
        Command::BaselineTrain(a) => train(&a, &cfg, cli.seed, true),
        Command::Localize(a) => localize(&a, &cfg, cli.seed),
        Command::Eval(a) => eval(&a, &cfg, cli.seed),
        Command::Plot(a) => crate::plot::plot(&a),
    }
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => usage(format!("unknown split '{other}' (expected train or test)")),
    }
}

fn datasets(args: &[PathBuf], cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let list = if args.is_empty() { cfg.datasets.clone() } else { args.to_vec() };
    if list.is_empty() {
        return usage("no dataset given (use --dataset or a config file)");
    }
    Ok(list)
}

/// Network configuration stored next to a checkpoint.
pub fn network_config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

fn load_frames(roots: &[PathBuf], split: Split) -> anyhow::Result<Vec<Frame>> {
    let mut all = Vec::new();
    for (i, root) in roots.iter().enumerate() {
        let frames = load_split(root, split).with_context(|| format!("reading {}", root.display()))?;
        for mut f in frames {
            if roots.len() > 1 {
                f.id = format!("scene{i}/{}", f.id);
            }
            all.push(f);
        }
    }
    if all.is_empty() {
        bail!("no {} frames found", split.name());
    }
    Ok(all)
}

fn gen_scene(a: &GenSceneArgs, seed: Option<u64>) -> Result<()> {
    let room_seed = a.room_seed.or(seed).unwrap_or(1);
    if a.origin.len() != 3 {
        return usage(format!("--origin needs three values, got {}", a.origin.len()));
    }
    let room = RoomSpec {
        detail_seed: a.detail_seed.unwrap_or(room_seed),
        origin: [a.origin[0], a.origin[1], a.origin[2]],
        ..RoomSpec::new(a.extent, a.density, room_seed)
    };
    let f = a.focal.unwrap_or(0.875 * a.width as f64);
    let intrinsics = CameraIntrinsics {
        fx: f,
        fy: f,
        cx: (a.width as f64 - 1.0) / 2.0,
        cy: (a.height as f64 - 1.0) / 2.0,
        width: a.width,
        height: a.height,
    };
    if intrinsics.validate().is_err() {
        return usage(format!("invalid camera: {}x{} with focal {f}", a.width, a.height));
    }
    let meta = SceneFile {
        room: Some(room),
        intrinsics,
        pose_seed: seed.unwrap_or(room_seed),
        train_frames: a.train_frames,
        test_frames: a.test_frames,
    };
    generate_dataset(&a.out, &meta).with_context(|| format!("generating {}", a.out.display()))?;
    println!("wrote {} train and {} test frames to {}", a.train_frames, a.test_frames, a.out.display());
    Ok(())
}

fn build_tree(a: &BuildTreeArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let mut settings = cfg.tree_build.clone();
    if let Some(b) = &a.branching {
        settings.branching = b.clone();
    }
    if let Some(r) = a.restarts {
        settings.restarts = r;
    }
    if let Some(s) = seed {
        settings.seed = s;
    }
    if settings.branching.is_empty() || settings.branching.contains(&0) {
        return usage(format!("invalid branching {:?}", settings.branching));
    }
    let scenes: Vec<_> = match &a.points {
        Some(p) => vec![read_points(p).with_context(|| format!("reading {}", p.display()))?],
        None => {
            let mut scenes = Vec::new();
            for root in &a.datasets {
                let frames = load_frames(std::slice::from_ref(root), Split::Train)?;
                scenes.push(training_points(frames.iter().map(|f| &f.sample)));
            }
            scenes
        }
    };
    let tree = build_scene_tree(&scenes, &settings).context("building tree")?;
    tree.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "tree over {} points, labels per level {:?}, {} leaves -> {}",
        scenes.iter().map(Vec::len).sum::<usize>(),
        tree.label_counts(),
        tree.leaves().len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, cfg: &RunConfig, seed: Option<u64>, baseline: bool) -> Result<()> {
    let roots = datasets(&a.datasets, cfg)?;
    let mut settings = cfg.training.clone();
    if let Some(it) = a.iterations {
        settings.iterations = it;
    }
    if let Some(lr) = a.lr {
        settings.lr0 = lr;
    }
    if a.w_reg.is_some() {
        settings.w_reg = a.w_reg;
    }
    if a.no_augment {
        settings.augment = false;
    }
    if let Some(s) = seed {
        settings.seed = s;
    }
    if settings.iterations == 0 {
        return usage("--iterations must be at least 1");
    }
    let base_net = match &a.network {
        Some(p) => HscNetConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => cfg.network.clone(),
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.checkpoint.clone());
    let frames = load_frames(&roots, Split::Train)?;
    let samples: Vec<_> = frames.into_iter().map(|f| f.sample).collect();

    let (tree, net_cfg) = if baseline {
        let tree = baseline_tree(&training_points(samples.iter()), &cfg.tree_build).context("building baseline anchor")?;
        let tree_out = a.tree.clone().unwrap_or_else(|| out.with_extension("tree.json"));
        tree.save(&tree_out).with_context(|| format!("writing {}", tree_out.display()))?;
        (tree, base_net.regression_only())
    } else {
        let path = a.tree.clone().unwrap_or_else(|| cfg.tree.clone());
        let tree = LabelTree::load(&path).with_context(|| format!("reading {}", path.display()))?;
        let net_cfg = network_for_tree(&base_net, &tree);
        (tree, net_cfg)
    };
    let opts = settings.options(net_cfg.levels(), roots.len() > 1);
    let mut net = HscNet::new(net_cfg.clone()).context("creating network")?;
    check_tree(&net, &tree).context("tree does not match the network")?;
    log::info!(
        "training {} parameters on {} frames for {} iterations",
        net.params().scalar_count(),
        samples.len(),
        settings.iterations
    );
    let history = hscnet_core::training::train(&mut net, &samples, &tree, &opts).context("training")?;

    net.save_checkpoint(&out).with_context(|| format!("writing {}", out.display()))?;
    net_cfg.save(network_config_path(&out)).context("writing network configuration")?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
    write_history_csv(&csv_path, &history).with_context(|| format!("writing {}", csv_path.display()))?;
    let last = history.last().expect("at least one iteration");
    println!("final loss {} -> {}", last.loss, out.display());
    Ok(())
}

struct Model {
    net: HscNet,
    tree: LabelTree,
}

fn load_model(a: &ModelArgs, cfg: &RunConfig) -> Result<Model> {
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint.clone());
    let tree_path = a.tree.clone().unwrap_or_else(|| cfg.tree.clone());
    let tree = LabelTree::load(&tree_path).with_context(|| format!("reading {}", tree_path.display()))?;
    let net_cfg_path = network_config_path(&ckpt);
    let net_cfg = HscNetConfig::load(&net_cfg_path).with_context(|| format!("reading {}", net_cfg_path.display()))?;
    let net = HscNet::load(net_cfg, &ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    check_tree(&net, &tree).context("tree does not match the checkpoint")?;
    Ok(Model { net, tree })
}

fn ransac(a: &ModelArgs, cfg: &RunConfig, seed: Option<u64>) -> hscnet_core::RansacConfig {
    let mut r = cfg.ransac.clone();
    if let Some(h) = a.hypotheses {
        r.hypotheses = h;
    }
    if let Some(s) = seed {
        r.seed = s;
    }
    r
}

fn format_pose(p: &RigidPose) -> String {
    let m = p.to_homogeneous();
    (0..4)
        .map(|r| (0..4).map(|c| format!("{:>12.6}", m[(r, c)])).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

fn localize(a: &LocalizeArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let split = parse_split(&a.model.split)?;
    let roots = datasets(&a.model.datasets, cfg)?;
    let ransac_cfg = ransac(&a.model, cfg, seed);
    if ransac_cfg.hypotheses == 0 {
        return usage("--hypotheses must be at least 1");
    }
    let model = load_model(&a.model, cfg)?;
    let root = &roots[0];
    let meta = read_scene_file(root).with_context(|| format!("reading {}", root.display()))?;
    let frame = read_frame(root, split, &a.frame, &meta.intrinsics)
        .with_context(|| format!("reading frame {} of {}", a.frame, root.display()))?;
    let k = frame.sample.intrinsics;
    let (est, map) = localize_frame(&frame.sample.image, &model.net, &model.tree, &k, &ransac_cfg)
        .with_context(|| format!("localizing {}", a.frame))?;
    let err = pose_error(&est.pose, &frame.sample.pose);
    println!("{}", format_pose(&est.pose));
    println!(
        "inliers {}/{}, score {:.3}, refinement iterations {}",
        est.inlier_count(),
        est.inliers.len(),
        est.score,
        est.iterations
    );
    println!("error {:.4} m / {:.3} deg", err.translation_m, err.rotation_deg);
    if let Some(path) = &a.dump {
        let corrs = hscnet_core::eval::grid_correspondences(&map, None, model.net.config().output_stride);
        save_correspondence_dump(path, &corrs, &est.pose, &k, ransac_cfg.inlier_threshold)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let split = parse_split(&a.model.split)?;
    let roots = datasets(&a.model.datasets, cfg)?;
    let frames = load_frames(&roots, split)?;
    let report = if a.copy_gt {
        let ids: Vec<String> = frames.iter().map(|f| f.id.clone()).collect();
        let truths: Vec<RigidPose> = frames.iter().map(|f| f.sample.pose).collect();
        let est: Vec<Option<RigidPose>> = truths.iter().copied().map(Some).collect();
        evaluate(&ids, &est, &truths).context("evaluating")?
    } else {
        let model = load_model(&a.model, cfg)?;
        evaluate_frames(&model.net, &model.tree, &frames, &ransac(&a.model, cfg, seed)).context("evaluating")?.0
    };
    let path = a.report.clone().unwrap_or_else(|| cfg.report.clone());
    report.save(&path).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.table());
    Ok(())
}

/// Loads a report written by `eval`.
pub fn read_report(path: &Path) -> anyhow::Result<EvalReport> {
    EvalReport::load(path).with_context(|| format!("reading {}", path.display()))
}
