use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use pairforge::aggregate::{
    encode_head, netvlad_init, sample_local_features, GemParams, Head, HeadInput, HeadKind, LinearParams,
};
use pairforge::annotate::{build_covisibility, parse_positive_lists, positive_lists, write_positive_lists};
use pairforge::losses::LossConfig;
use pairforge::mining::{descriptors_by_id, mine_epochs, write_batches, CountingProvider, MiningConfig, MiningStrategy};
use pairforge::model::{
    encode_feature_map, parse_matches, parse_reconstruction, write_matches, write_reconstruction, DescriptorSet,
    FeatureMap, ImageId, Reconstruction,
};
use pairforge::retrieval::{
    accuracy_report, ann_query, brute_force_knn, build_ann_index, parse_pairs, write_pairs, GroundTruth, HnswConfig,
    HnswIndex,
};
use pairforge::synth::{generate, SynthConfig};
use pairforge::trainer::{checkpoint, restore, write_metrics, LossKind, TrainConfig, TrainState};
use pairforge::viewgraph::{build_view_graph, normalized_cut, parse_view_graph, write_partition, write_view_graph};
use rayon::prelude::*;

use crate::args::*;
use crate::io::{load_head, load_inputs, read_bytes, read_descriptors, read_text, write, write_descriptors, Inputs, MAP_EXTENSION};

/// Local features sampled for NetVLAD codebook initialization.
const NETVLAD_INIT_SAMPLES: usize = 20_000;

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Annotate(a) => annotate(a),
        Command::Graph(a) => graph(a),
        Command::Partition(a) => partition(a),
        Command::Mine(a) => mine(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Index(a) => index(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn parse_grid(grid: &str) -> Result<(usize, usize)> {
    let (r, c) = grid.split_once(['x', 'X']).with_context(|| format!("grid must look like 4x4, got {grid:?}"))?;
    Ok((r.trim().parse().context("grid rows")?, c.trim().parse().context("grid columns")?))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let (grid_rows, grid_cols) = parse_grid(&a.grid)?;
    let cfg = SynthConfig {
        scenes: a.scenes,
        grid_rows,
        grid_cols,
        overlap: a.overlap,
        seed: a.seed,
        points_per_cell: a.points_per_cell,
        descriptor_dim: a.dim,
        ..SynthConfig::default()
    };
    let out = generate(&cfg)?;
    let maps_dir = a.out.join("maps");
    fs::create_dir_all(&maps_dir).with_context(|| format!("cannot create {}", maps_dir.display()))?;
    write(&a.out.join("recon.txt"), write_reconstruction(&out.reconstruction))?;
    write(&a.out.join("matches.txt"), write_matches(&out.matches))?;
    write_descriptors(&a.out.join("descriptors.dvec"), &out.base_descriptors)?;
    for (&id, map) in &out.feature_maps {
        write(&maps_dir.join(format!("{}.{MAP_EXTENSION}", out.name_of(id))), encode_feature_map(map))?;
    }
    info!(
        "{} images, {} points, {} matched pairs written to {}",
        out.reconstruction.images().len(),
        out.reconstruction.points().len(),
        out.matches.len(),
        a.out.display()
    );
    Ok(())
}

fn load_recon(path: &std::path::Path) -> Result<Reconstruction> {
    parse_reconstruction(&read_text(path)?).with_context(|| format!("invalid reconstruction {}", path.display()))
}

fn annotate(a: &AnnotateArgs) -> Result<()> {
    let r = load_recon(&a.recon)?;
    let table = build_covisibility(&r);
    let lists = positive_lists(&table, &r, a.epsilon);
    info!("{} covisible pairs, max GS {}", table.len(), table.max_gs());
    write(&a.out, write_positive_lists(&lists))
}

fn graph(a: &GraphArgs) -> Result<()> {
    let r = load_recon(&a.recon)?;
    let matches = parse_matches(&read_text(&a.matches)?).with_context(|| format!("invalid matches {}", a.matches.display()))?;
    let g = build_view_graph(&matches, &r, a.rew)?;
    info!("view graph: {} vertices, {} edges", g.vertices().len(), g.edges().len());
    write(&a.out, write_view_graph(&g))
}

fn partition(a: &PartitionArgs) -> Result<()> {
    let g = parse_view_graph(&read_text(&a.graph)?).with_context(|| format!("invalid graph {}", a.graph.display()))?;
    let p = normalized_cut(&g, a.max_size)?;
    info!("{} clusters", p.len());
    write(&a.out, write_partition(&p))
}

fn mine(a: &MineArgs) -> Result<()> {
    let r = load_recon(&a.recon)?;
    let lists = parse_positive_lists(&read_text(&a.poslists)?, &r)
        .with_context(|| format!("invalid positive lists {}", a.poslists.display()))?;
    let cfg = MiningConfig {
        b: a.b,
        m: a.m,
        t: a.t,
        epsilon: lists.epsilon(),
        seed: a.seed,
    };
    let (batches, extractions) = match a.strategy {
        Strategy::Batched => {
            let mut provider = CountingProvider::new(|_: ImageId| Vec::new());
            let batches = mine_epochs(MiningStrategy::Batched, &lists, &cfg, a.epochs, &mut provider)?;
            (batches, provider.extractions())
        }
        Strategy::GlobalHard => {
            let desc = a.desc.as_deref().context("global-hard mining needs --desc")?;
            let descriptors = descriptors_by_id(&read_descriptors(desc)?, &r)?;
            let mut provider = CountingProvider::new(|id: ImageId| descriptors[&id].clone());
            let batches = mine_epochs(MiningStrategy::GlobalHard, &lists, &cfg, a.epochs, &mut provider)?;
            (batches, provider.extractions())
        }
    };
    info!("{} batches, {extractions} descriptor extractions", batches.len());
    write(&a.out, write_batches(&batches))
}

fn head_kind(h: HeadArg) -> HeadKind {
    match h {
        HeadArg::Netvlad => HeadKind::NetVlad,
        HeadArg::Gem => HeadKind::Gem,
        HeadArg::Max => HeadKind::Max,
        HeadArg::Linear => HeadKind::Linear,
    }
}

/// An untrained head for `inputs`; NetVLAD gets a k-means codebook.
fn default_head(kind: HeadKind, inputs: &Inputs, clusters: usize, sharpness: f64, seed: u64) -> Result<Head> {
    ensure!(kind.takes_maps() == matches!(inputs, Inputs::Maps(_)), "{kind} head needs {} inputs", if kind.takes_maps() {
        "feature-map"
    } else {
        "descriptor"
    });
    Ok(match (kind, inputs) {
        (HeadKind::NetVlad, Inputs::Maps(maps)) => {
            let refs: Vec<&FeatureMap> = maps.iter().map(|(_, m)| m).collect();
            let samples = sample_local_features(&refs, NETVLAD_INIT_SAMPLES, seed);
            Head::NetVlad(netvlad_init(&samples, clusters, sharpness, seed)?)
        }
        (HeadKind::Gem, _) => Head::Gem(GemParams::default()),
        (HeadKind::Max, _) => Head::Max,
        (HeadKind::Linear, _) => Head::Linear(LinearParams::identity(inputs.dim(), inputs.dim())?),
        _ => unreachable!("input kind checked above"),
    })
}

fn check_head(head: &Head, kind: HeadKind) -> Result<()> {
    ensure!(head.kind() == kind, "parameters are for a {} head, --head says {kind}", head.kind());
    Ok(())
}

/// Re-keys named inputs by image id.
fn by_id<T: Clone>(named: impl Iterator<Item = (String, T)>, r: &Reconstruction) -> Result<BTreeMap<ImageId, T>> {
    named
        .map(|(name, v)| {
            let id = r.image_by_name(&name).with_context(|| format!("input {name:?} is not in the reconstruction"))?.id;
            Ok((id, v))
        })
        .collect()
}

fn train(a: &TrainArgs) -> Result<()> {
    let r = load_recon(&a.recon)?;
    let batches = pairforge::mining::parse_batches(&read_text(&a.batches)?)
        .with_context(|| format!("invalid batch file {}", a.batches.display()))?;
    let inputs = load_inputs(&a.inputs)?;
    let kind = head_kind(a.head);
    let cfg = TrainConfig {
        initial_lr: a.lr,
        lr_decay_rate: a.lr_decay,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        iterations_per_epoch: a.iters,
        loss: match a.loss {
            LossArg::Triplet => LossKind::Triplet,
            LossArg::Rll => LossKind::RankedList,
        },
        loss_cfg: LossConfig::new(a.margin, a.alpha, !a.all_terms)?,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut state = match &a.resume {
        Some(path) => {
            let state = restore(&read_bytes(path)?).with_context(|| format!("invalid checkpoint {}", path.display()))?;
            check_head(&state.head, kind)?;
            info!("resuming at step {}", state.step);
            state
        }
        None => TrainState::new(default_head(kind, &inputs, a.clusters, a.sharpness, a.seed)?, a.seed),
    };

    let mut log: Box<dyn std::io::Write> = match &a.metrics {
        Some(path) => Box::new(
            fs::OpenOptions::new()
                .create(true)
                .append(a.resume.is_some())
                .write(true)
                .truncate(a.resume.is_none())
                .open(path)
                .with_context(|| format!("cannot open {}", path.display()))?,
        ),
        None => Box::new(std::io::stdout().lock()),
    };
    let total = cfg.total_steps();
    let run = |state: &mut TrainState, log: &mut dyn std::io::Write| -> Result<()> {
        match &inputs {
            Inputs::Maps(maps) => {
                let source = by_id(maps.iter().cloned(), &r)?;
                while state.step < total {
                    let rec = state.step(&batches, &source, &cfg)?;
                    log.write_all(write_metrics(&[rec]).as_bytes())?;
                }
            }
            Inputs::Vectors(set) => {
                let source = by_id(set.entries().iter().cloned(), &r)?;
                while state.step < total {
                    let rec = state.step(&batches, &source, &cfg)?;
                    log.write_all(write_metrics(&[rec]).as_bytes())?;
                }
            }
        }
        Ok(())
    };
    let outcome = run(&mut state, &mut *log);
    log.flush()?;
    // keep progress on divergence so the run can be inspected
    write(&a.out, checkpoint(&state))?;
    outcome?;
    if let Some(last) = state.history.last() {
        info!("finished at step {} with loss {:.6}", state.step, last.loss);
    }
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let inputs = load_inputs(&a.maps)?;
    let kind = head_kind(a.head);
    let head = match &a.params {
        Some(path) => load_head(path)?,
        None => default_head(kind, &inputs, a.clusters, pairforge::aggregate::DEFAULT_SHARPNESS, a.seed)?,
    };
    check_head(&head, kind)?;
    let entries: Vec<(String, Vec<f64>)> = match &inputs {
        Inputs::Maps(maps) => maps
            .par_iter()
            .map(|(name, m)| Ok((name.clone(), head.forward(HeadInput::Map(m))?.0)))
            .collect::<Result<_>>()?,
        Inputs::Vectors(set) => set
            .entries()
            .par_iter()
            .map(|(name, v)| Ok((name.clone(), head.forward(HeadInput::Vector(v))?.0)))
            .collect::<Result<_>>()?,
    };
    let dim = entries.first().map_or(1, |(_, v)| v.len());
    let set = DescriptorSet::from_entries(dim, entries)?;
    info!("{} descriptors of dimension {dim}", set.len());
    if let Some(path) = &a.params_out {
        write(path, encode_head(&head))?;
    }
    write_descriptors(&a.out, &set)
}

fn index(a: &IndexArgs) -> Result<()> {
    let corpus = read_descriptors(&a.desc)?;
    let cfg = HnswConfig {
        m: a.m,
        ef_construction: a.ef_construction,
        ef_search: a.ef_search,
        seed: a.seed,
    };
    let idx = build_ann_index(&corpus, cfg)?;
    info!("indexed {} descriptors", idx.len());
    write(&a.out, idx.encode())
}

fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let queries = read_descriptors(&a.desc)?;
    let results = match &a.index {
        Some(path) => {
            let idx = HnswIndex::decode(&read_bytes(path)?).with_context(|| format!("invalid index {}", path.display()))?;
            ann_query(&idx, &queries, a.k)?
        }
        None => brute_force_knn(&queries, &queries, a.k)?,
    };
    write(&a.out, write_pairs(&results))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let r = load_recon(&a.recon)?;
    let matches = parse_matches(&read_text(&a.matches)?).with_context(|| format!("invalid matches {}", a.matches.display()))?;
    let results = parse_pairs(&read_text(&a.pairs)?).with_context(|| format!("invalid pairs {}", a.pairs.display()))?;
    for (pair, _) in matches.iter() {
        for id in [pair.lo(), pair.hi()] {
            if r.image(id).is_none() {
                bail!("matches reference image {id}, which is not in the reconstruction");
            }
        }
    }
    let truth = GroundTruth::from_matches(&matches, a.inlier_threshold, |id| r.image(id).expect("checked above").name.clone());
    let report = accuracy_report(&results.pairs(), &truth);
    let mut out = std::io::stdout().lock();
    writeln!(out, "accuracy={:?} pairs={} correct={}", report.accuracy, report.pairs, report.correct)?;
    Ok(())
}
