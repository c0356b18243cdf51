#![no_main]

use libfuzzer_sys::fuzz_target;

// A config that exercises every override surface: nested tables, tagged
// enums, arrays of callbacks, and nested transform pipelines.
const BASE: &str = r#"
seed = 7
run_dir = "runs/fuzz"

[data]
batch_size = 8
val_samples = 16

[data.dataset]
name = "gaussian_blobs"
n_samples = 64
n_classes = 4
dim = 6

[data.train_transform]
kind = "multi_view"
views = [
    [{ type = "random_horizontal_flip", p = 0.5 }],
    [{ type = "random_horizontal_flip", p = 0.5 }],
]

[module]
forward = "simclr"

[module.backbone]
name = "mlp"
in_dim = 6
hidden = 8
out_dim = 8

[module.projector]
name = "linear"
in_dim = 8
out_dim = 4

[module.optim.optimizer]
type = "SGD"
lr = 0.1

[trainer]
max_epochs = 1

[[callbacks]]
type = "online_knn"
name = "knn"
input = "embedding"
target = "label"
queue_length = 32
"#;

// Override strings arrive straight from argv, so the dotted-path walker has
// to survive any byte sequence: missing '=', bogus indices, type mismatches,
// unknown keys (which trigger the suggestion search), and non-TOML values.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let overrides = [text.to_string()];
    let _ = spk::config::parse_config(BASE, &overrides);
});
