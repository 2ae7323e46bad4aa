//! Writes the synthetic infrared fixture set: images, ground-truth masks, a
//! prompt CSV and the manifest tying them together.
//!
//! Usage: `cargo run -p forge-core --example make_fixtures [OUT_DIR]`

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forge_core::io::{append_prompt_rows, save_image, save_mask, PromptRow};
use forge_core::types::{BinaryMask, PromptKind, RasterImage};

const SIZE: usize = 128;
const IMAGES: usize = 10;
const MIN_SPACING: f64 = 24.0;
const MARGIN: f64 = 12.0;

struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    amp: f64,
}

impl Blob {
    fn value(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.sx;
        let dy = (y - self.cy) / self.sy;
        self.amp * (-0.5 * (dx * dx + dy * dy)).exp()
    }
}

fn place(rng: &mut ChaCha8Rng, taken: &mut Vec<(f64, f64)>) -> (f64, f64) {
    loop {
        let c = (
            rng.gen_range(MARGIN..SIZE as f64 - MARGIN),
            rng.gen_range(MARGIN..SIZE as f64 - MARGIN),
        );
        if taken
            .iter()
            .all(|t| (t.0 - c.0).hypot(t.1 - c.1) >= MIN_SPACING)
        {
            taken.push(c);
            return c;
        }
    }
}

fn blob(rng: &mut ChaCha8Rng, taken: &mut Vec<(f64, f64)>, amp: std::ops::Range<f64>) -> Blob {
    let (cx, cy) = place(rng, taken);
    Blob {
        cx: cx.round() + rng.gen_range(-0.3..0.3),
        cy: cy.round() + rng.gen_range(-0.3..0.3),
        sx: rng.gen_range(0.8..2.2),
        sy: rng.gen_range(0.8..2.2),
        amp: rng.gen_range(amp),
    }
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
        });
    for sub in ["images", "gt"] {
        fs::create_dir_all(out.join(sub)).unwrap();
    }
    let prompts_path = out.join("prompts.csv");
    let _ = fs::remove_file(&prompts_path);
    let mut entries = Vec::new();

    for i in 0..IMAGES {
        let id = format!("ir_{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(0x1F0 + i as u64);
        let mut taken = Vec::new();
        let targets: Vec<Blob> = (0..rng.gen_range(1..=4))
            .map(|_| blob(&mut rng, &mut taken, 0.35..0.75))
            .collect();
        let decoys: Vec<Blob> = (0..rng.gen_range(0..=3))
            .map(|_| blob(&mut rng, &mut taken, 0.3..0.6))
            .collect();
        let (gx, gy) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));

        let mut pixels = vec![0.0; SIZE * SIZE];
        let mut gt = vec![0u8; SIZE * SIZE];
        for y in 0..SIZE {
            for x in 0..SIZE {
                let (fx, fy) = (x as f64, y as f64);
                let mut v = 0.2 + gx * fx / SIZE as f64 + gy * fy / SIZE as f64;
                v += rng.gen_range(-0.02..0.02);
                for t in &targets {
                    let b = t.value(fx, fy);
                    v += b;
                    if b >= 0.5 * t.amp {
                        gt[y * SIZE + x] = 1;
                    }
                }
                for d in &decoys {
                    v += d.value(fx, fy);
                }
                pixels[y * SIZE + x] = v.clamp(0.0, 1.0);
            }
        }
        save_image(
            &RasterImage::new(SIZE, SIZE, pixels).unwrap(),
            out.join("images").join(format!("{id}.png")),
        )
        .unwrap();
        save_mask(
            &BinaryMask::new(SIZE, SIZE, gt).unwrap(),
            out.join("gt").join(format!("{id}.png")),
        )
        .unwrap();

        let source = match i {
            0..=3 => r#"{"kind": "derive_centroid"}"#.to_string(),
            4..=6 => format!(r#"{{"kind": "derive_coarse", "seed": {}}}"#, 7 + i),
            _ => {
                // Hand-placed clicks on the rounded blob centers.
                let rows: Vec<PromptRow> = targets
                    .iter()
                    .map(|t| PromptRow {
                        image_id: id.clone(),
                        x: t.cx.round() as u32,
                        y: t.cy.round() as u32,
                        kind: PromptKind::Centroid,
                    })
                    .collect();
                append_prompt_rows(&prompts_path, &rows).unwrap();
                r#"{"kind": "file", "path": "prompts.csv"}"#.to_string()
            }
        };
        entries.push(format!(
            r#"    {{"image_id": "{id}", "image_path": "images/{id}.png", "gt_path": "gt/{id}.png", "prompt_source": {source}}}"#
        ));
        println!("{id}: {} targets, {} decoys", targets.len(), decoys.len());
    }
    fs::write(
        out.join("manifest.json"),
        format!(
            "{{\n  \"version\": 1,\n  \"images\": [\n{}\n  ]\n}}\n",
            entries.join(",\n")
        ),
    )
    .unwrap();
}
