//! Generated reference page: every flag of every subcommand and every
//! configuration key with its default.

use std::fmt::Write;

use catreid::trainer::TrainConfig;
use catreid::Result;
use clap::{Arg, CommandFactory};
use serde_json::Value;

use crate::Cli;

/// Short descriptions of configuration keys, by dotted path prefix.
const KEY_NOTES: &[(&str, &str)] = &[
    ("epochs", "Training epochs."),
    ("p", "Entities per batch."),
    ("k", "Images per entity in a batch."),
    ("learning_rate", "Base SGD learning rate."),
    ("momentum", "SGD momentum."),
    ("weight_decay", "L2 weight decay added to the gradient."),
    ("schedule.milestones", "Fractions of training after which the rate is multiplied by gamma."),
    ("schedule.gamma", "Rate multiplier at each milestone."),
    ("seed", "Seed for initialisation, sampling, augmentation and splits."),
    ("validate_every", "Validate every this many epochs when a validation set is given."),
    ("cache_images", "Keep decoded box crops in memory between epochs."),
    ("pretrained.full", "Safetensors backbone weights for the full-image stream."),
    ("pretrained.partial", "Safetensors backbone weights for the trunk and limb streams."),
    ("augment.enabled", "Per-operation switches."),
    ("augment.blur_sigma_range", "Gaussian blur sigma range, pixels."),
    ("augment.noise_std_range", "Additive noise std range, intensity units in [0, 1]."),
    ("augment.perspective_distortion", "Max corner displacement as a fraction of half the image size."),
    ("augment.rotation_degrees", "Rotation drawn from [-r, r] degrees."),
    ("augment.erase_probability", "Chance of erasing one rectangle."),
    ("augment.erase_area_range", "Erased area as a fraction of the image."),
    ("augment.fill", "Fill colour for erased and rotated-in pixels; dataset mean when unset."),
    ("loss.triplet_margin", "Batch-hard triplet margin."),
    ("loss.arcface_scale", "Angular-margin head scale."),
    ("loss.arcface_margin", "Angular-margin head additive margin, radians."),
    ("loss.use_arcface", "Use angular-margin logits instead of plain linear logits."),
    ("loss.head_weights", "Identity and triplet weights for each embedding head."),
    ("stream.full_backbone", "Backbone of the full-image stream."),
    ("stream.partial_backbone", "Backbone of the trunk and limb streams."),
    ("stream.embed_dim", "Embedding width; equals 4 x limb block + 2 x tail block."),
    ("stream.limb_embed_dim", "Embedding width of each leg part."),
    ("stream.tail_embed_dim", "Embedding width of each tail part."),
    ("stream.num_entities", "Classifier width; replaced by the training set's entity count."),
    ("stream.share_limb_backbone", "One backbone for all limb parts instead of one each."),
    ("stream.full_input", "Full-image input [width, height]."),
    ("stream.trunk_input", "Trunk crop input [width, height]."),
    ("stream.limb_input", "Limb and tail crop input [width, height]."),
    ("parts", "Keypoint pairs and aspect ratios of the part crops."),
];

fn note(path: &str) -> &'static str {
    KEY_NOTES
        .iter()
        .filter(|(k, _)| path == *k || path.starts_with(&format!("{k}.")))
        .max_by_key(|(k, _)| k.len())
        .map(|(_, n)| *n)
        .unwrap_or("")
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&path, v, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), "unset".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn arg_row(arg: &Arg) -> Option<String> {
    let long = arg.get_long()?;
    if matches!(long, "help" | "version") {
        return None;
    }
    let value = if arg.get_num_args().is_some_and(|n| n.takes_values()) {
        let names = arg.get_value_names().map(|v| v.join(" ")).unwrap_or_else(|| "VALUE".into());
        format!(" `{names}`")
    } else {
        String::new()
    };
    let default = arg
        .get_default_values()
        .iter()
        .map(|v| v.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(", ");
    let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
    let required = if arg.is_required_set() { "yes" } else { "" };
    Some(format!("| `--{long}`{value} | {required} | {default} | {help} |"))
}

/// Markdown reference for the command line and the configuration file.
pub fn render(config: &TrainConfig) -> Result<String> {
    let cmd = Cli::command();
    let mut s = String::new();
    let _ = writeln!(s, "# catreid command reference\n");
    let _ = writeln!(s, "Generated by `catreid reference`. Do not edit by hand.\n");
    let _ = writeln!(s, "## Global flags\n");
    let _ = writeln!(s, "| flag | required | default | description |\n|---|---|---|---|");
    for arg in cmd.get_arguments() {
        if let Some(row) = arg_row(arg) {
            let _ = writeln!(s, "{row}");
        }
    }
    let _ = writeln!(s, "\n## Exit codes\n");
    let _ = writeln!(s, "| code | kinds |\n|---|---|");
    let groups: [&[&str]; 9] = [
        &["usage"],
        &["config"],
        &["validation"],
        &["missing-images"],
        &["io", "image", "format"],
        &["checkpoint"],
        &["non-finite-loss"],
        &["projector"],
        &["geometry", "loss", "tensor"],
    ];
    for kinds in groups {
        let _ = writeln!(s, "| {} | {} |", crate::exit_code(kinds[0]), kinds.join(", "));
    }
    let _ = writeln!(
        s,
        "\nFailures print one JSON line on standard error: `{{\"status\":\"error\",\"kind\":...,\"code\":...,\"message\":...}}`. \
         Success prints one JSON summary line on standard output. Every run except `reference` writes `run_manifest.json` into its output directory.\n"
    );
    let _ = writeln!(s, "## Subcommands\n");
    for sub in cmd.get_subcommands() {
        let _ = writeln!(s, "### `{}`\n", sub.get_name());
        if let Some(about) = sub.get_about() {
            let _ = writeln!(s, "{about}\n");
        }
        let _ = writeln!(s, "| flag | required | default | description |\n|---|---|---|---|");
        for arg in sub.get_arguments().filter(|a| !a.is_global_set()) {
            if let Some(row) = arg_row(arg) {
                let _ = writeln!(s, "{row}");
            }
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "## Configuration keys\n");
    let _ = writeln!(s, "Keys of the `--config` TOML file. Omitted keys take the defaults below; unknown keys are rejected.\n");
    let _ = writeln!(s, "| key | default | description |\n|---|---|---|");
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(config)?, &mut rows);
    for (key, default) in rows {
        let _ = writeln!(s, "| `{key}` | `{default}` | {} |", note(&key));
    }
    let _ = writeln!(s, "\n### Defaults as TOML\n\n```toml\n{}```", config.to_toml()?);
    Ok(s)
}
