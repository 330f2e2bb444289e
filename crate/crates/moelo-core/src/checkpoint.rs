//! Self-describing JSON checkpoints for models and whole experiments.
//!
//! Every 64-bit float is stored as the 16-hex-digit bit pattern of its IEEE
//! representation, so a save/load cycle is bit-exact by construction rather
//! than by the grace of a decimal formatter. Structure, dimensions, seeds,
//! and freeze flags are stored in plain JSON fields so a document can be
//! inspected and validated without the code that wrote it.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::continual::{ReplayBuffer, ReplayEntry};
use crate::error::{Error, Result};
use crate::etf::AnchorFrame;
use crate::model::{ClassRegistry, DrTarget, Expert, ModelConfig, MoEModel};
use crate::numkit::{Activation, DenseLayer, Matrix, Mlp};

pub const MODEL_FORMAT: &str = "moelo-model";
pub const EXPERIMENT_FORMAT: &str = "moelo-experiment";
pub const FORMAT_VERSION: u64 = 1;

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn f64_from_hex(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(Error::Checkpoint(format!(
            "float field has {} hex digits, expected 16",
            s.len()
        )));
    }
    let bits = u64::from_str_radix(s, 16)
        .map_err(|e| Error::Checkpoint(format!("bad float bit pattern {s:?}: {e}")))?;
    Ok(f64::from_bits(bits))
}

fn floats_to_json(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|&v| Value::String(f64_to_hex(v))).collect())
}

fn floats_from_json(doc: &Value, field: &str) -> Result<Vec<f64>> {
    let arr = doc
        .as_array()
        .ok_or_else(|| Error::Checkpoint(format!("{field} is not an array")))?;
    arr.iter()
        .map(|v| {
            v.as_str()
                .ok_or_else(|| Error::Checkpoint(format!("{field} holds a non-string float")))
                .and_then(f64_from_hex)
        })
        .collect()
}

fn obj<'a>(doc: &'a Value, field: &str) -> Result<&'a Map<String, Value>> {
    doc.get(field)
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Checkpoint(format!("missing object field {field:?}")))
}

fn arr<'a>(doc: &'a Value, field: &str) -> Result<&'a [Value]> {
    doc.get(field)
        .and_then(Value::as_array)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Checkpoint(format!("missing array field {field:?}")))
}

fn uint(doc: &Value, field: &str) -> Result<u64> {
    doc.get(field)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Checkpoint(format!("missing integer field {field:?}")))
}

fn string<'a>(doc: &'a Value, field: &str) -> Result<&'a str> {
    doc.get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing string field {field:?}")))
}

fn boolean(doc: &Value, field: &str) -> Result<bool> {
    doc.get(field)
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::Checkpoint(format!("missing boolean field {field:?}")))
}

fn hex_field(doc: &Value, field: &str) -> Result<f64> {
    string(doc, field).and_then(f64_from_hex)
}

fn matrix_to_json(m: &Matrix) -> Value {
    json!({
        "rows": m.rows(),
        "cols": m.cols(),
        "data": floats_to_json(m.as_slice()),
    })
}

fn matrix_from_json(doc: &Value, field: &str) -> Result<Matrix> {
    let rows = uint(doc, "rows")? as usize;
    let cols = uint(doc, "cols")? as usize;
    let data = floats_from_json(
        doc.get("data")
            .ok_or_else(|| Error::Checkpoint(format!("{field} has no data array")))?,
        field,
    )?;
    if data.len() != rows * cols {
        return Err(Error::Checkpoint(format!(
            "{field} holds {} values for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    Matrix::from_vec(rows, cols, data)
        .map_err(|e| Error::Checkpoint(format!("{field}: {e}")))
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

fn activation_from_name(name: &str) -> Result<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        other => Err(Error::Checkpoint(format!("unknown activation {other:?}"))),
    }
}

fn layer_to_json(layer: &DenseLayer) -> Value {
    json!({
        "activation": activation_name(layer.activation),
        "weights": matrix_to_json(&layer.weights),
        "bias": floats_to_json(&layer.bias),
    })
}

fn layer_from_json(doc: &Value, field: &str) -> Result<DenseLayer> {
    let weights = matrix_from_json(
        doc.get("weights")
            .ok_or_else(|| Error::Checkpoint(format!("{field} has no weights")))?,
        field,
    )?;
    let bias = floats_from_json(
        doc.get("bias")
            .ok_or_else(|| Error::Checkpoint(format!("{field} has no bias")))?,
        field,
    )?;
    if bias.len() != weights.cols() {
        return Err(Error::Checkpoint(format!(
            "{field} bias has {} entries for {} output units",
            bias.len(),
            weights.cols()
        )));
    }
    let activation = activation_from_name(string(doc, "activation")?)?;
    Ok(DenseLayer {
        weights,
        bias,
        activation,
    })
}

fn mlp_to_json(net: &Mlp) -> Value {
    json!({
        "dropout_rate": f64_to_hex(net.dropout_rate),
        "layers": net.layers.iter().map(layer_to_json).collect::<Vec<_>>(),
    })
}

fn mlp_from_json(doc: &Value, field: &str) -> Result<Mlp> {
    let dropout_rate = hex_field(doc, "dropout_rate")?;
    let layers = arr(doc, "layers")?
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_json(l, &format!("{field}.layers[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Mlp::new(layers, dropout_rate).map_err(|e| Error::Checkpoint(format!("{field}: {e}")))
}

fn config_to_json(config: &ModelConfig) -> Value {
    let dr_target = match config.dr_target {
        DrTarget::InverseSqrt => "inverse_sqrt",
        DrTarget::Unity => "unity",
    };
    json!({
        "input_dim": config.input_dim,
        "encoder_hidden": config.encoder_hidden,
        "latent_dim": config.latent_dim,
        "expert_hidden": config.expert_hidden,
        "dropout_rate": f64_to_hex(config.dropout_rate),
        "r_max": config.r_max,
        "dr_target": dr_target,
        "w_ce": f64_to_hex(config.w_ce),
        "w_dr": f64_to_hex(config.w_dr),
        "seed": config.seed,
    })
}

fn config_from_json(doc: &Value) -> Result<ModelConfig> {
    let dr_target = match string(doc, "dr_target")? {
        "inverse_sqrt" => DrTarget::InverseSqrt,
        "unity" => DrTarget::Unity,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown alignment target {other:?}"
            )))
        }
    };
    Ok(ModelConfig {
        input_dim: uint(doc, "input_dim")? as usize,
        encoder_hidden: uint(doc, "encoder_hidden")? as usize,
        latent_dim: uint(doc, "latent_dim")? as usize,
        expert_hidden: uint(doc, "expert_hidden")? as usize,
        dropout_rate: hex_field(doc, "dropout_rate")?,
        r_max: uint(doc, "r_max")? as usize,
        dr_target,
        w_ce: hex_field(doc, "w_ce")?,
        w_dr: hex_field(doc, "w_dr")?,
        seed: uint(doc, "seed")?,
    })
}

fn registry_to_json(registry: &ClassRegistry) -> Value {
    let regions = registry
        .regions()
        .iter()
        .map(|&region_id| {
            // local_classes/rp_coord cannot fail for a registered region.
            let classes = registry
                .local_classes(region_id)
                .expect("registered region")
                .iter()
                .map(|&rp| {
                    let coords = registry.rp_coord(rp).expect("registered reference point");
                    json!({
                        "rp": rp,
                        "coords": floats_to_json(&coords),
                    })
                })
                .collect::<Vec<_>>();
            json!({ "region_id": region_id, "classes": classes })
        })
        .collect::<Vec<_>>();
    json!({ "regions": regions })
}

fn registry_from_json(doc: &Value) -> Result<ClassRegistry> {
    let mut registry = ClassRegistry::new();
    for (i, region) in arr(doc, "regions")?.iter().enumerate() {
        let region_id = uint(region, "region_id")? as usize;
        let mut classes = Vec::new();
        for class in arr(region, "classes")? {
            let rp = uint(class, "rp")? as usize;
            let coords = floats_from_json(
                class
                    .get("coords")
                    .ok_or_else(|| Error::Checkpoint("class has no coords".into()))?,
                "coords",
            )?;
            if coords.len() != 3 {
                return Err(Error::Checkpoint(format!(
                    "coords for reference point {rp} has {} components, expected 3",
                    coords.len()
                )));
            }
            classes.push((rp, [coords[0], coords[1], coords[2]]));
        }
        registry
            .add_region(region_id, &classes)
            .map_err(|e| Error::Checkpoint(format!("registry region {i}: {e}")))?;
    }
    Ok(registry)
}

/// Serializes a model to a self-contained JSON document.
pub fn model_to_json(model: &MoEModel) -> Value {
    let frame = model.frame();
    let experts = model
        .experts()
        .iter()
        .map(|e| {
            json!({
                "region_id": e.region_id,
                "anchor_index": e.anchor_index,
                "frozen": e.frozen,
                "net": mlp_to_json(&e.net),
            })
        })
        .collect::<Vec<_>>();
    json!({
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "config": config_to_json(&model.config),
        "frame": {
            "dim": frame.dim,
            "r_max": frame.r_max,
            "seed": frame.seed,
            "anchors": matrix_to_json(frame.anchors()),
        },
        "encoder": mlp_to_json(model.encoder()),
        "projection": layer_to_json(model.projection()),
        "experts": experts,
        "registry": registry_to_json(model.registry()),
    })
}

/// Rebuilds a model from a document produced by [`model_to_json`].
pub fn model_from_json(doc: &Value) -> Result<MoEModel> {
    let format = string(doc, "format")?;
    if format != MODEL_FORMAT {
        return Err(Error::Checkpoint(format!(
            "document format {format:?}, expected {MODEL_FORMAT:?}"
        )));
    }
    let version = uint(doc, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "document version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config = config_from_json(
        doc.get("config")
            .ok_or_else(|| Error::Checkpoint("missing object field \"config\"".into()))?,
    )?;
    let frame_doc = doc
        .get("frame")
        .ok_or_else(|| Error::Checkpoint("missing object field \"frame\"".into()))?;
    let anchors = matrix_from_json(
        frame_doc
            .get("anchors")
            .ok_or_else(|| Error::Checkpoint("frame has no anchors".into()))?,
        "frame.anchors",
    )?;
    let frame = AnchorFrame::from_parts(
        uint(frame_doc, "dim")? as usize,
        uint(frame_doc, "r_max")? as usize,
        uint(frame_doc, "seed")?,
        anchors,
    )
    .map_err(|e| Error::Checkpoint(format!("frame: {e}")))?;
    let encoder = mlp_from_json(
        doc.get("encoder")
            .ok_or_else(|| Error::Checkpoint("missing object field \"encoder\"".into()))?,
        "encoder",
    )?;
    let projection = layer_from_json(
        doc.get("projection")
            .ok_or_else(|| Error::Checkpoint("missing object field \"projection\"".into()))?,
        "projection",
    )?;
    let experts = arr(doc, "experts")?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Expert {
                region_id: uint(e, "region_id")? as usize,
                anchor_index: uint(e, "anchor_index")? as usize,
                frozen: boolean(e, "frozen")?,
                net: mlp_from_json(
                    e.get("net")
                        .ok_or_else(|| Error::Checkpoint(format!("expert {i} has no net")))?,
                    &format!("experts[{i}].net"),
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    obj(doc, "registry")?;
    let registry = registry_from_json(&doc["registry"])?;
    MoEModel::from_parts(config, frame, encoder, projection, experts, registry)
        .map_err(|e| Error::Checkpoint(format!("reassembly: {e}")))
}

fn entry_to_json(entry: &ReplayEntry) -> Value {
    json!({
        "features": floats_to_json(&entry.features),
        "global_label": entry.global_label,
        "device_id": entry.device_id,
        "region_id": entry.region_id,
    })
}

fn entry_from_json(doc: &Value, field: &str) -> Result<ReplayEntry> {
    Ok(ReplayEntry {
        features: floats_from_json(
            doc.get("features")
                .ok_or_else(|| Error::Checkpoint(format!("{field} has no features")))?,
            field,
        )?,
        global_label: uint(doc, "global_label")? as usize,
        device_id: uint(doc, "device_id")? as usize,
        region_id: uint(doc, "region_id")? as usize,
    })
}

/// Serializes a model plus its replay buffer, the whole resumable state of a
/// continual run.
pub fn experiment_to_json(model: &MoEModel, buffer: &ReplayBuffer) -> Value {
    let pairs = buffer
        .pairs()
        .map(|(device_id, region_id)| {
            let entries = buffer
                .entries_for_pair(device_id, region_id)
                .iter()
                .map(entry_to_json)
                .collect::<Vec<_>>();
            json!({
                "device_id": device_id,
                "region_id": region_id,
                "entries": entries,
            })
        })
        .collect::<Vec<_>>();
    json!({
        "format": EXPERIMENT_FORMAT,
        "version": FORMAT_VERSION,
        "model": model_to_json(model),
        "replay": {
            "per_pair_capacity": buffer.per_pair_capacity,
            "pairs": pairs,
        },
    })
}

/// Rebuilds the model and replay buffer from a document produced by
/// [`experiment_to_json`].
pub fn experiment_from_json(doc: &Value) -> Result<(MoEModel, ReplayBuffer)> {
    let format = string(doc, "format")?;
    if format != EXPERIMENT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "document format {format:?}, expected {EXPERIMENT_FORMAT:?}"
        )));
    }
    let version = uint(doc, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "document version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let model = model_from_json(
        doc.get("model")
            .ok_or_else(|| Error::Checkpoint("missing object field \"model\"".into()))?,
    )?;
    let replay_doc = doc
        .get("replay")
        .ok_or_else(|| Error::Checkpoint("missing object field \"replay\"".into()))?;
    let capacity = uint(replay_doc, "per_pair_capacity")? as usize;
    let mut buffer =
        ReplayBuffer::new(capacity).map_err(|e| Error::Checkpoint(format!("replay: {e}")))?;
    for (i, pair) in arr(replay_doc, "pairs")?.iter().enumerate() {
        let device_id = uint(pair, "device_id")? as usize;
        let region_id = uint(pair, "region_id")? as usize;
        let entries = arr(pair, "entries")?
            .iter()
            .map(|e| entry_from_json(e, &format!("replay.pairs[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        if entries.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "replay pair ({device_id}, {region_id}) holds {} entries, capacity is {capacity}",
                entries.len()
            )));
        }
        buffer.set_pair(device_id, region_id, entries);
    }
    Ok((model, buffer))
}

pub fn save_model(model: &MoEModel, path: &Path) -> Result<()> {
    let doc = model_to_json(model);
    fs::write(path, serde_json::to_string_pretty(&doc).expect("valid json") + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    let text = fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    model_from_json(&doc)
}

pub fn save_experiment(model: &MoEModel, buffer: &ReplayBuffer, path: &Path) -> Result<()> {
    let doc = experiment_to_json(model, buffer);
    fs::write(path, serde_json::to_string_pretty(&doc).expect("valid json") + "\n")?;
    Ok(())
}

pub fn load_experiment(path: &Path) -> Result<(MoEModel, ReplayBuffer)> {
    let text = fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    experiment_from_json(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continual::update_replay;
    use crate::continual::Sample;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> MoEModel {
        let config = ModelConfig {
            input_dim: 6,
            encoder_hidden: 10,
            latent_dim: 8,
            expert_hidden: 7,
            dropout_rate: 0.1,
            r_max: 4,
            dr_target: DrTarget::InverseSqrt,
            w_ce: 1.0,
            w_dr: 1.0,
            seed: 2024,
        };
        let mut model = MoEModel::new(config).unwrap();
        model
            .add_expert(0, &[(0, [0.0, 0.0, 1.5]), (1, [3.0, 0.0, 1.5])])
            .unwrap();
        model
            .add_expert(3, &[(7, [0.0, 3.0, 1.5]), (8, [3.0, 3.0, 1.5]), (9, [6.0, 3.0, 1.5])])
            .unwrap();
        model.expert_mut(0).unwrap().frozen = true;
        model
    }

    #[test]
    fn float_hex_round_trip_is_bit_exact() {
        for v in [0.0, -0.0, 1.0, -1.5, 1e-300, f64::MAX, std::f64::consts::PI] {
            let back = f64_from_hex(&f64_to_hex(v)).unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
        assert!(f64_from_hex("zz").is_err());
        assert!(f64_from_hex("00000000000000000").is_err());
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = small_model();
        let doc = model_to_json(&model);
        let restored = model_from_json(&doc).unwrap();
        assert_eq!(restored.param_bytes(), model.param_bytes());
        assert_eq!(restored.config, model.config);
        assert_eq!(restored.frame().seed, model.frame().seed);
        assert_eq!(
            restored.frame().anchors().as_slice(),
            model.frame().anchors().as_slice()
        );
        assert_eq!(restored.experts().len(), 2);
        assert!(restored.experts()[0].frozen);
        assert!(!restored.experts()[1].frozen);
        assert_eq!(restored.registry(), model.registry());
    }

    #[test]
    fn model_round_trip_survives_text_form() {
        let model = small_model();
        let text = serde_json::to_string(&model_to_json(&model)).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        let restored = model_from_json(&doc).unwrap();
        assert_eq!(restored.param_bytes(), model.param_bytes());
    }

    #[test]
    fn restored_model_predicts_identically() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let restored = model_from_json(&model_to_json(&model)).unwrap();
        let (region_a, rp_a, coord_a) = model.predict_location(&x).unwrap();
        let (region_b, rp_b, coord_b) = restored.predict_location(&x).unwrap();
        assert_eq!(region_a, region_b);
        assert_eq!(rp_a, rp_b);
        for axis in 0..3 {
            assert_eq!(coord_a[axis].to_bits(), coord_b[axis].to_bits());
        }
    }

    #[test]
    fn experiment_round_trip_restores_replay() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Sample> = (0..6)
            .map(|i| Sample {
                features: (0..6).map(|_| rng.random::<f64>()).collect(),
                device_id: i % 2,
                region_id: if i % 2 == 0 { 0 } else { 3 },
                rp_id: if i % 2 == 0 { i % 2 } else { 7 + i % 3 },
            })
            .collect();
        let mut buffer = ReplayBuffer::new(2).unwrap();
        update_replay(&mut buffer, &model, &samples).unwrap();
        assert!(buffer.len() > 0);

        let doc = experiment_to_json(&model, &buffer);
        let (restored_model, restored_buffer) = experiment_from_json(&doc).unwrap();
        assert_eq!(restored_model.param_bytes(), model.param_bytes());
        assert_eq!(restored_buffer.per_pair_capacity, buffer.per_pair_capacity);
        assert_eq!(restored_buffer.len(), buffer.len());
        for (device_id, region_id) in buffer.pairs() {
            let before = buffer.entries_for_pair(device_id, region_id);
            let after = restored_buffer.entries_for_pair(device_id, region_id);
            assert_eq!(before.len(), after.len());
            for (b, a) in before.iter().zip(after) {
                assert_eq!(b.global_label, a.global_label);
                let b_bits: Vec<u64> = b.features.iter().map(|v| v.to_bits()).collect();
                let a_bits: Vec<u64> = a.features.iter().map(|v| v.to_bits()).collect();
                assert_eq!(b_bits, a_bits);
            }
        }
    }

    #[test]
    fn file_round_trip_works() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = small_model();
        save_model(&model, &path).unwrap();
        let restored = load_model(&path).unwrap();
        assert_eq!(restored.param_bytes(), model.param_bytes());
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let model = small_model();
        let mut doc = model_to_json(&model);
        doc["format"] = Value::String("something-else".into());
        let err = model_from_json(&doc).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        let buffer = ReplayBuffer::new(1).unwrap();
        let mut doc = experiment_to_json(&model, &buffer);
        doc["format"] = Value::String(MODEL_FORMAT.into());
        assert!(matches!(
            experiment_from_json(&doc),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupt_fields_are_rejected() {
        let model = small_model();

        let mut doc = model_to_json(&model);
        doc["encoder"]["layers"][0]["weights"]["data"][0] = Value::String("nothex".into());
        assert!(matches!(model_from_json(&doc), Err(Error::Checkpoint(_))));

        let mut doc = model_to_json(&model);
        doc["projection"]["weights"]["rows"] = Value::from(3);
        assert!(matches!(model_from_json(&doc), Err(Error::Checkpoint(_))));

        let mut doc = model_to_json(&model);
        doc.as_object_mut().unwrap().remove("frame");
        assert!(matches!(model_from_json(&doc), Err(Error::Checkpoint(_))));

        let mut doc = model_to_json(&model);
        doc["version"] = Value::from(99);
        assert!(matches!(model_from_json(&doc), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_expert_region_is_rejected() {
        let model = small_model();
        let mut doc = model_to_json(&model);
        doc["experts"][0]["region_id"] = Value::from(5);
        assert!(matches!(model_from_json(&doc), Err(Error::Checkpoint(_))));
    }
}
