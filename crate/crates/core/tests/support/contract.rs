//! Training-loop contract checks on a tiny synthetic task: stage isolation,
//! projection correctness and seed determinism.

#![allow(dead_code)]

use protogrid_core::data::{generate_synthetic_mnist, DatasetSplit, DigitPool, RasterSample};
use protogrid_core::encoder::{EncoderConfig, StageConfig};
use protogrid_core::head::LossConfig;
use protogrid_core::model::{ModelKind, ProtoNet};
use protogrid_core::parallel::Sequential;
use protogrid_core::train::{train, TrainConfig, Trainer, TransferMode};

/// Ten digits, `per_digit` textured 28x28 images each.
pub fn digit_pool(per_digit: usize) -> DigitPool {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for d in 0..10usize {
        for k in 0..per_digit {
            for r in 0..28 {
                for c in 0..28 {
                    let on = (4..24).contains(&r) && (4..24).contains(&c) && (r * 5 + c * (d + 2) + k * 3) % (d + 3) == 0;
                    images.push(if on { 180 + d as u8 * 7 } else { 0 });
                }
            }
            labels.push(d as u8);
        }
    }
    DigitPool::from_flat(&images, &labels).expect("well-formed pool")
}

/// `n_total` synthetic samples, 60/20/20.
pub fn tiny_data(n_total: usize, seed: u64) -> DatasetSplit {
    generate_synthetic_mnist(&digit_pool(3), n_total, (0.6, 0.2, 0.2), seed).expect("generation").0
}

pub fn tiny_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        encoder: EncoderConfig {
            in_channels: 1,
            stages: vec![StageConfig::standard(2), StageConfig::standard(3)],
            negative_slope: 0.01,
            embedding_h: 2,
            embedding_w: 2,
            dropout: 0.2,
        },
        prototypes_per_class: 2,
        location_scaling: true,
        loss: LossConfig { cluster: 0.7, separation: 0.7, diversity: 0.001, diversity_threshold: 0.001, l1: 0.01 },
        epsilon: 1e-4,
        batch_size: 16,
        learning_rate: 0.001,
        projection_period: 2,
        max_cycles: 3,
        patience: 8,
        extra_stage3_epochs: 1,
        seed: 5,
        head_init_range: 0.01,
        clip_norm: Some(5.0),
        transfer: TransferMode::None,
        pretrained: None,
    }
}

fn proto(t: &Trainer<'_, f32, Sequential>) -> ProtoNet<f32> {
    t.model.as_prototype().expect("prototype model").clone()
}

/// Stage 1 leaves the head alone, projection touches only prototype vectors
/// and provenance, stage 3 touches only the head. All comparisons are bitwise.
pub fn stage_isolation() -> Result<(), String> {
    let data = tiny_data(200, 3);
    let mut t = Trainer::<f32, _>::new(tiny_config(ModelKind::ProtoChannel), &data, &Sequential).map_err(|e| e.to_string())?;
    let start = proto(&t);
    t.stage_one_epoch(1).map_err(|e| e.to_string())?;
    let s1 = proto(&t);
    if s1.head != start.head {
        return Err("stage 1 changed the head".into());
    }
    if s1.encoder == start.encoder || s1.bank.vectors == start.bank.vectors {
        return Err("stage 1 did not update the encoder and prototypes".into());
    }
    t.refresh(true, 1).map_err(|e| e.to_string())?;
    let pr = proto(&t);
    if pr.head != s1.head || pr.encoder != s1.encoder || pr.bank.scaling != s1.bank.scaling {
        return Err("projection changed something other than the prototype vectors".into());
    }
    if !pr.bank.is_projected() {
        return Err("projection left prototypes without provenance".into());
    }
    t.stage_three_epoch(1).map_err(|e| e.to_string())?;
    let s3 = proto(&t);
    if s3.encoder != pr.encoder || s3.bank != pr.bank {
        return Err("stage 3 changed the encoder or prototype layer".into());
    }
    if s3.head == pr.head {
        return Err("stage 3 did not update the head".into());
    }
    Ok(())
}

/// Projects the prototypes of a briefly trained model over a 50-sample
/// training split and compares each replacement with a brute-force search.
pub fn projection_exhaustive() -> Result<(), String> {
    // The first seed whose 50 training samples cover every class.
    let data = (11..)
        .map(|seed| tiny_data(84, seed))
        .find(|d| (0..d.num_classes).all(|k| d.train.iter().any(|s| s.label == k)))
        .expect("some seed covers all classes");
    if data.train.len() != 50 {
        return Err(format!("expected 50 training samples, got {}", data.train.len()));
    }
    let mut t = Trainer::<f32, _>::new(tiny_config(ModelKind::ProtoChannel), &data, &Sequential).map_err(|e| e.to_string())?;
    t.stage_one_epoch(1).map_err(|e| e.to_string())?;
    let before = proto(&t);
    t.refresh(true, 1).map_err(|e| e.to_string())?;
    let after = proto(&t);
    let refs: Vec<&RasterSample> = data.train.iter().collect();
    let z = before.embed(&refs).map_err(|e| e.to_string())?;
    let bank = &before.bank;
    let (groups, cells, d) = (before.groups(), bank.cells(), bank.dim);
    for a in 0..bank.total() {
        let id = bank.identity(a);
        let mut best: Option<(f32, u64, usize, usize)> = None;
        for (i, s) in refs.iter().enumerate() {
            if s.label != id.class {
                continue;
            }
            for cell in 0..cells {
                let off = ((i * groups + id.group) * cells + cell) * d;
                let dist: f32 = (0..d).map(|t| (z[off + t] - bank.vector(a)[t]).powi(2)).sum();
                let better = match best {
                    None => true,
                    Some((bd, bid, bc, _)) => dist < bd || (dist == bd && (s.id, cell) < (bid, bc)),
                };
                if better {
                    best = Some((dist, s.id, cell, off));
                }
            }
        }
        let (_, sid, cell, off) = best.ok_or_else(|| format!("no class-{} sample for prototype {a}", id.class))?;
        let prov = after.bank.provenance[a].ok_or_else(|| format!("prototype {a} has no provenance"))?;
        if (prov.sample_id, prov.row * bank.grid_w + prov.col) != (sid, cell) {
            return Err(format!(
                "prototype {a}: projected onto sample {} cell ({}, {}), brute force found sample {sid} cell {cell}",
                prov.sample_id, prov.row, prov.col
            ));
        }
        if (prov.class, prov.channel) != (id.class, id.group) {
            return Err(format!("prototype {a}: provenance class/channel {:?} mismatch", (prov.class, prov.channel)));
        }
        if after.bank.vector(a) != &z[off..off + d] {
            return Err(format!("prototype {a} is not bitwise equal to its source patch"));
        }
    }
    Ok(())
}

/// Two runs with the same seed agree bitwise in weights and history; a
/// different seed gives a different model.
pub fn seed_determinism() -> Result<(), String> {
    let data = tiny_data(200, 3);
    let cfg = tiny_config(ModelKind::ProtoChannel);
    let a = train::<f32, _>(&cfg, &data, &Sequential, &mut |_| {}).map_err(|e| e.to_string())?;
    let b = train::<f32, _>(&cfg, &data, &Sequential, &mut |_| {}).map_err(|e| e.to_string())?;
    if a.model != b.model || a.history != b.history {
        return Err("same seed produced different runs".into());
    }
    let mut other = cfg.clone();
    other.seed += 1;
    let c = train::<f32, _>(&other, &data, &Sequential, &mut |_| {}).map_err(|e| e.to_string())?;
    if c.model == a.model {
        return Err("a different seed produced an identical model".into());
    }
    Ok(())
}
