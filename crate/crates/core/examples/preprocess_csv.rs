//! Runs the preprocessing pipeline on a small hand-written CSV with one
//! continuous and two categorical features, then writes the artifacts to a
//! directory.
//!
//! cargo run --example preprocess_csv -- [out_dir]

use std::fs;
use std::path::PathBuf;

use caat_ehr::data::{read_raw_csv, run_pipeline, write_processed, DatasetSchema};

const SCHEMA: &str = r#"
trim_length = 200
min_time_points = 3

[[features]]
name = "heart_rate"
kind = "continuous"
normal = 86

[[features]]
name = "capillary_refill"
kind = "categorical"
domain = ["normal", "delayed"]
normal = "normal"

[[features]]
name = "gcs_eye"
kind = "categorical"
domain = ["none", "to_pain", "to_speech", "spontaneous"]
normal = "spontaneous"
"#;

const RAW: &str = "\
subject_id,stay_id,time,heart_rate,capillary_refill,gcs_eye,label,los_days
p1,a,0,,normal,,0,3.5
p1,a,1,90,,to_speech,,
p1,a,2,,,,,
p1,a,3,95,delayed,,,
p2,b,0,70,normal,spontaneous,1,12
p2,b,1,,,,,
p2,b,2,72,,none,,
p3,c,0,110,delayed,to_pain,0,1
p3,c,1,105,,,,
p4,d,0,,normal,spontaneous,0,4
p4,d,1,,,,,
p4,d,2,,normal,,,
p5,e,0,80,normal,spontaneous,1,9
p5,e,1,82,normal,spontaneous,,
p5,e,2,81,delayed,to_speech,,
p5,e,3,79,delayed,to_speech,,
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("caat-preprocess"), PathBuf::from);
    let schema = DatasetSchema::from_toml(SCHEMA)?;
    let raw = read_raw_csv(RAW.as_bytes(), &schema)?;
    println!("read {} stays", raw.len());

    let result = run_pipeline(raw, &schema, 0.6, 0)?;
    for d in &result.dropped {
        println!("excluded {} ({})", d.stay_id, d.reason);
    }
    println!("modality 1 columns: {:?}", result.embedding.columns[0]);
    println!("modality 2 columns: {:?}", result.embedding.columns[1]);
    for s in result.embedding.samples.iter().chain(&result.downstream.samples) {
        println!("{} -> {}", s.stay_id, result.manifest.set_of(&s.stay_id).unwrap_or("?"));
        for r in 0..s.time_points() {
            println!("  t={} m1={:?} m2={:?}", s.times[r], s.m1.row(r), s.m2.row(r));
        }
    }

    fs::create_dir_all(&out)?;
    let mut buf = Vec::new();
    write_processed(&mut buf, &result.embedding)?;
    fs::write(out.join("embedding.csv"), buf)?;
    result.manifest.save(&out.join("manifest.csv"))?;
    result.norm.save(&out.join("normstats.csv"))?;
    println!("wrote artifacts to {}", out.display());
    Ok(())
}
