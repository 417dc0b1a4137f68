//! On-disk formats: dataset directories, aux provenance, checkpoints, step
//! logs, score files, reports and result tables.
//!
//! Binary arrays are little-endian and row-major; every writer emits its
//! output deterministically so reruns produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use sasa_core::bench::{AblationRow, ProtocolTable};
use sasa_core::evalmetrics::{format_percent, MetricsReport, ScoreSet};
use sasa_core::stylizer::Provenance;
use sasa_core::synthdata::{DataRole, DomainDataset, DomainKind, DomainSpec, DomainTag, Image, Label, Sample, CHANNELS};
use sasa_core::trainer::{Checkpoint, CheckpointManifest, StepRecord};

pub const MANIFEST: &str = "manifest.json";
pub const IMAGES: &str = "images.f32";
pub const SAMPLES: &str = "samples.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(bytes.len() % 4 == 0, "{}: length {} is not a multiple of 4", path.display(), bytes.len());
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(bytes.len() % 8 == 0, "{}: length {} is not a multiple of 8", path.display(), bytes.len());
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

// ---------------------------------------------------------------- datasets

/// JSON manifest of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DomainKind,
    /// Domain of every sample; `null` when samples come from several domains.
    pub domain: Option<DomainTag>,
    pub role: DataRole,
    pub seed: u64,
    pub spec: Option<DomainSpec>,
    pub splits: BTreeMap<String, Vec<usize>>,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-sample domains, present only for mixed datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_domains: Option<Vec<DomainTag>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    index: usize,
    label: String,
    subject_id: u32,
}

fn parse_label(s: &str) -> Result<Label> {
    match s {
        "live" => Ok(Label::Live),
        "spoof" => Ok(Label::Spoof),
        _ => bail!("unknown label `{s}`"),
    }
}

/// Writes `ds` as `manifest.json`, `images.f32` (N x C x H x W) and `samples.csv`.
pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (h, w) = ds.samples.first().map(|s| (s.image.height, s.image.width)).unwrap_or((0, 0));
    ensure!(
        ds.samples.iter().all(|s| s.image.height == h && s.image.width == w),
        "dataset `{}` mixes image sizes",
        ds.name
    );
    let first = ds.samples.first().map(|s| s.domain);
    let uniform = ds.samples.iter().all(|s| Some(s.domain) == first);
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        kind: ds.kind,
        domain: if uniform { first } else { None },
        role: ds.role,
        seed: ds.seed,
        spec: ds.spec.clone(),
        splits: ds.splits.clone(),
        count: ds.samples.len(),
        channels: CHANNELS,
        height: h,
        width: w,
        sample_domains: (!uniform).then(|| ds.samples.iter().map(|s| s.domain).collect()),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    let mut bytes = Vec::with_capacity(ds.samples.len() * CHANNELS * h * w * 4);
    for s in &ds.samples {
        bytes.extend(f32_bytes(&s.image.data));
    }
    fs::write(dir.join(IMAGES), bytes)?;
    let mut wtr = csv::Writer::from_path(dir.join(SAMPLES))?;
    for (index, s) in ds.samples.iter().enumerate() {
        wtr.serialize(SampleRow {
            index,
            label: s.label.name().to_string(),
            subject_id: s.subject_id,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let m: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    let pixels = read_f32(&dir.join(IMAGES))?;
    let per = m.channels * m.height * m.width;
    ensure!(m.channels == CHANNELS, "expected {CHANNELS} channels, manifest says {}", m.channels);
    ensure!(
        pixels.len() == m.count * per,
        "{}: {} floats for {} images of {} values",
        IMAGES,
        pixels.len(),
        m.count,
        per
    );
    let mut rdr = csv::Reader::from_path(dir.join(SAMPLES))?;
    let rows: Vec<SampleRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    ensure!(rows.len() == m.count, "{}: {} rows for {} images", SAMPLES, rows.len(), m.count);
    let mut samples = Vec::with_capacity(m.count);
    for (i, row) in rows.iter().enumerate() {
        ensure!(row.index == i, "{}: row {i} has index {}", SAMPLES, row.index);
        let domain = match (&m.sample_domains, m.domain) {
            (Some(d), _) => *d.get(i).ok_or_else(|| anyhow!("sample_domains too short"))?,
            (None, Some(d)) => d,
            (None, None) => bail!("manifest has neither `domain` nor `sample_domains`"),
        };
        samples.push(Sample {
            image: Image {
                height: m.height,
                width: m.width,
                data: pixels[i * per..(i + 1) * per].to_vec(),
            },
            label: parse_label(&row.label)?,
            domain,
            subject_id: row.subject_id,
        });
    }
    let ds = DomainDataset {
        name: m.name,
        kind: m.kind,
        samples,
        splits: m.splits,
        spec: m.spec,
        seed: m.seed,
        role: m.role,
    };
    ds.validate().map_err(|e| anyhow!("{}: {e}", dir.display()))?;
    Ok(ds)
}

// -------------------------------------------------------------- provenance

pub fn save_provenance(rows: &[Provenance], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["aux_index", "content_index", "style_index", "alpha"])?;
    for p in rows {
        wtr.write_record([
            p.aux_index.to_string(),
            p.content_index.to_string(),
            p.style_index.to_string(),
            p.alpha.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_provenance(path: &Path) -> Result<Vec<Provenance>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        ensure!(rec.len() == 4, "provenance rows need 4 fields");
        out.push(Provenance {
            aux_index: rec[0].parse()?,
            content_index: rec[1].parse()?,
            style_index: rec[2].parse()?,
            alpha: rec[3].parse()?,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------- checkpoints

/// Checkpoint manifest as written to disk: the trainer manifest (arch,
/// step, stage, ...) plus the tensor and moment file names in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    #[serde(flatten)]
    pub state: CheckpointManifest,
    pub tensors: Vec<TensorEntry>,
    pub moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
}

/// Writes `manifest.json` plus `params/<name>.f32` and `moments/<name>.f64`.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    let moments_dir = dir.join("moments");
    fs::create_dir_all(&params_dir)?;
    fs::create_dir_all(&moments_dir)?;
    let mut tensors = Vec::new();
    for (name, values) in &ck.params {
        let file = format!("params/{name}.f32");
        fs::write(dir.join(&file), f32_bytes(values))?;
        tensors.push(TensorEntry { name: name.clone(), file, len: values.len() });
    }
    let mut moments = Vec::new();
    for (name, values) in &ck.moments {
        let file = format!("moments/{name}.f64");
        fs::write(dir.join(&file), f64_bytes(values))?;
        moments.push(TensorEntry { name: name.clone(), file, len: values.len() });
    }
    let m = &ck.manifest;
    write_json(
        &dir.join(MANIFEST),
        &CheckpointFile {
            state: m.clone(),
            tensors,
            moments,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let f: CheckpointFile = read_json(&dir.join(MANIFEST))?;
    let mut params = Vec::new();
    for t in &f.tensors {
        let v = read_f32(&dir.join(&t.file))?;
        ensure!(v.len() == t.len, "{}: {} values, manifest says {}", t.file, v.len(), t.len);
        params.push((t.name.clone(), v));
    }
    let mut moments = Vec::new();
    for t in &f.moments {
        let v = read_f64(&dir.join(&t.file))?;
        ensure!(v.len() == t.len, "{}: {} values, manifest says {}", t.file, v.len(), t.len);
        moments.push((t.name.clone(), v));
    }
    Ok(Checkpoint { manifest: f.state, params, moments })
}

// ---------------------------------------------------------------- step log

pub const STEP_LOG_HEADER: [&str; 11] = [
    "step", "stage", "L_Cls", "L_Sem", "L_Sep", "L_Adv_ta", "L_Adv_cs", "L_Lfc", "L_total", "D_ta_acc", "D_cs_acc",
];

fn opt_text(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_parse(s: &str) -> Result<Option<f64>> {
    Ok(if s.is_empty() { None } else { Some(s.parse()?) })
}

pub fn write_step_log(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(STEP_LOG_HEADER)?;
    for r in records {
        wtr.write_record([
            r.step.to_string(),
            r.stage.name().to_string(),
            r.l_cls.to_string(),
            r.l_sem.to_string(),
            r.l_sep.to_string(),
            r.l_adv_ta.to_string(),
            r.l_adv_cs.to_string(),
            r.l_lfc.to_string(),
            r.l_total.to_string(),
            opt_text(r.d_ta_acc),
            opt_text(r.d_cs_acc),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    ensure!(header == STEP_LOG_HEADER, "{}: unexpected columns {header:?}", path.display());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let r = rec?;
        out.push(StepRecord {
            step: r[0].parse()?,
            stage: r[1].parse().map_err(|e| anyhow!("{e}"))?,
            l_cls: r[2].parse()?,
            l_sem: r[3].parse()?,
            l_sep: r[4].parse()?,
            l_adv_ta: r[5].parse()?,
            l_adv_cs: r[6].parse()?,
            l_lfc: r[7].parse()?,
            l_total: r[8].parse()?,
            d_ta_acc: opt_parse(&r[9])?,
            d_cs_acc: opt_parse(&r[10])?,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------------ scores

pub fn write_scores(sets: &[ScoreSet], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["sample_index", "domain", "label", "score"])?;
    for set in sets {
        for ((i, l), s) in set.indices.iter().zip(&set.labels).zip(&set.scores) {
            wtr.write_record([i.to_string(), set.domain.to_string(), l.name().to_string(), s.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a score file back into one set per domain, in order of first appearance.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreSet>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut order: Vec<DomainTag> = Vec::new();
    let mut parts: BTreeMap<DomainTag, (Vec<usize>, Vec<Label>, Vec<f64>)> = BTreeMap::new();
    for rec in rdr.records() {
        let r = rec?;
        ensure!(r.len() == 4, "score rows need 4 fields");
        let d: DomainTag = r[1].parse().map_err(|e| anyhow!("{e}"))?;
        if !parts.contains_key(&d) {
            order.push(d);
        }
        let e = parts.entry(d).or_default();
        e.0.push(r[0].parse()?);
        e.1.push(parse_label(&r[2])?);
        e.2.push(r[3].parse()?);
    }
    order
        .into_iter()
        .map(|d| {
            let (i, l, s) = parts.remove(&d).expect("domain recorded");
            ScoreSet::new(d, i, l, s).map_err(|e| anyhow!("{e}"))
        })
        .collect()
}

// ----------------------------------------------------------------- reports

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    read_json(path)
}

/// Checks a report JSON value against the fixed schema: the five top-level
/// keys, and four finite rates per domain entry.
pub fn validate_report_json(v: &serde_json::Value) -> Result<()> {
    let obj = v.as_object().ok_or_else(|| anyhow!("report is not an object"))?;
    let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    let mut expected = ["mean", "per_domain", "seeds", "std", "threshold"];
    expected.sort();
    ensure!(keys == expected, "report keys {keys:?}, expected {expected:?}");
    ensure!(obj["threshold"].is_number(), "threshold must be a number");
    let check_domains = |d: &serde_json::Value, what: &str| -> Result<()> {
        let m = d.as_object().ok_or_else(|| anyhow!("{what} is not an object"))?;
        ensure!(!m.is_empty(), "{what} is empty");
        for (name, entry) in m {
            for k in ["apcer", "bpcer", "acer", "hter"] {
                let x = entry[k].as_f64().ok_or_else(|| anyhow!("{what}.{name}.{k} missing"))?;
                ensure!(x.is_finite() && (0.0..=1.0).contains(&x), "{what}.{name}.{k} = {x} outside [0, 1]");
            }
        }
        Ok(())
    };
    check_domains(&obj["per_domain"], "per_domain")?;
    check_domains(&obj["mean"], "mean")?;
    check_domains(&obj["std"], "std")?;
    let seeds = obj["seeds"].as_array().ok_or_else(|| anyhow!("seeds is not a list"))?;
    ensure!(!seeds.is_empty(), "no seed entries");
    for s in seeds {
        ensure!(s["seed"].is_u64() && s["threshold"].is_number(), "seed entry needs seed and threshold");
        check_domains(&s["per_domain"], "seeds[].per_domain")?;
    }
    Ok(())
}

fn pct(mean: f64, std: f64) -> String {
    format!("{} ± {}", format_percent(mean), format_percent(std))
}

/// Protocol table: one row per method; per evaluated target its HTER and the
/// source ACER of the same runs, both in percent as `mean ± std`.
pub fn write_protocol_table(table: &ProtocolTable, path: &Path) -> Result<()> {
    let mut methods: Vec<&str> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for (m, t, r) in &table.rows {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
        for d in r.mean.keys().filter(|d| d.as_str() != "source") {
            let key = if t == "all" { d.clone() } else { t.clone() };
            if !columns.contains(&key) {
                columns.push(key);
            }
        }
    }
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec![String::from("method")];
    for c in &columns {
        header.push(format!("{c} HTER (%)"));
        header.push(format!("{c} source ACER (%)"));
    }
    wtr.write_record(&header)?;
    for m in methods {
        let mut row = vec![m.to_string()];
        for c in &columns {
            let hit = table.rows.iter().find(|(rm, rt, r)| rm == m && (rt == c || (rt == "all" && r.mean.contains_key(c))));
            match hit {
                Some((_, _, r)) => {
                    row.push(pct(r.mean[c].hter, r.std[c].hter));
                    row.push(pct(r.mean["source"].acer, r.std["source"].acer));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Ablation table: flags, then source ACER and target HTER in percent.
pub fn write_ablation_table(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "config", "few-shot target", "aux", "lfc", "cont", "adv", "progressive", "source ACER (%)", "target HTER (%)",
    ])?;
    let mark = |b: bool| if b { "x" } else { "" }.to_string();
    for r in rows {
        let f = r.flags;
        wtr.write_record([
            r.name.clone(),
            mark(f.use_target),
            mark(f.use_aux),
            mark(f.use_lfc),
            mark(f.use_cont),
            mark(f.use_adv),
            mark(f.use_adv && f.progressive),
            pct(r.source_acer, r.source_acer_std),
            pct(r.target_hter, r.target_hter_std),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
