use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde_json::json;

use advscope_core::attack::{attack_dataset, AttackConfig};
use advscope_core::cluster::Linkage;
use advscope_core::data::{generate_shapes_dataset, load_dataset, save_dataset};
use advscope_core::image::{encode_png, heatmap_rgb8, planar_png};
use advscope_core::nn::{load_model, save_model, ModelSpec, Network, TrainConfig};
use advscope_core::store;
use advscope_core::vulnmap::{vulnerability_score, ValueSpace, VulnParams};
use advscope_core::workspace::{Run, Side};
use advscope_core::Workbench;
use advscope_server::{api, AppState};

use crate::{Attack, Export, Failure, GenData, LinkageArg, Precompute, Serve, SideArg, Space, Train, VulnArgs, What};

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    workdir.join(p)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

/// Prefixes io errors with the path that caused them.
fn at<T>(path: &Path, r: advscope_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        advscope_core::Error::Io(io) => Failure::io(format!("{}: {io}", path.display())),
        other => Failure::from(other),
    })
}

fn check_unit(field: &str, v: f64, allow_one: bool) -> Result<(), Failure> {
    let ok = v > 0.0 && (v < 1.0 || (allow_one && v == 1.0));
    if ok {
        Ok(())
    } else {
        Err(Failure::validation(format!("--{field} must lie in (0, 1{}", if allow_one { "]" } else { ")" })))
    }
}

impl From<LinkageArg> for Linkage {
    fn from(l: LinkageArg) -> Self {
        match l {
            LinkageArg::Average => Linkage::Average,
            LinkageArg::Complete => Linkage::Complete,
            LinkageArg::Single => Linkage::Single,
        }
    }
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Benign => Side::Benign,
            SideArg::Adv => Side::Adv,
        }
    }
}

impl From<&VulnArgs> for VulnParams {
    fn from(v: &VulnArgs) -> Self {
        VulnParams {
            k: v.k,
            s: v.s,
            value_space: match v.space {
                Space::Probability => ValueSpace::Probability,
                Space::Logit => ValueSpace::Logit,
            },
        }
    }
}

pub fn gen_data(wd: &Path, a: GenData) -> Result<(), Failure> {
    if a.per_class == 0 {
        return Err(Failure::validation("--per-class must be at least 1"));
    }
    let data = generate_shapes_dataset(a.seed, a.per_class, a.size)?;
    save_dataset(&data, resolve(wd, &a.out))?;
    println!("wrote {} images ({}x{}) to {}", data.len(), a.size, a.size, a.out.display());
    Ok(())
}

pub fn train(wd: &Path, a: Train) -> Result<(), Failure> {
    if a.holdout_every < 2 {
        return Err(Failure::validation("--holdout-every must be at least 2"));
    }
    let data_dir = resolve(wd, &a.data);
    let data = at(&data_dir, load_dataset(&data_dir))?;
    let (train_set, test_set) = data.split_holdout(a.holdout_every);
    let spec = ModelSpec::mini_net_sized(data.image_size(), data.class_names().to_vec());
    let mut net = Network::<f32>::init(spec, a.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        seed: a.seed,
    };
    let started = Instant::now();
    let report = advscope_core::nn::train(&mut net, &train_set, Some(&test_set), &config)?;
    for e in &report.history {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}",
            e.epoch,
            e.mean_loss,
            e.train_accuracy,
            e.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    let out = resolve(wd, &a.out);
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::io(e.to_string()))?;
    }
    save_model(&net, &out)?;
    let summary = json!({
        "train_images": train_set.len(),
        "test_images": test_set.len(),
        "config": config,
        "history": report.history,
        "test_accuracy": report.final_test_accuracy(),
    });
    let mut report_path = out.clone().into_os_string();
    report_path.push(".report.json");
    write(Path::new(&report_path), &serde_json::to_vec_pretty(&summary).expect("plain data"))?;
    println!(
        "test accuracy {:.4} after {} epochs ({:.1}s); model written to {}",
        report.final_test_accuracy().unwrap_or(f64::NAN),
        a.epochs,
        started.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

pub fn attack(wd: &Path, a: Attack) -> Result<(), Failure> {
    let config = AttackConfig {
        steps: a.steps,
        epsilon: a.eps,
        step_size: a.alpha,
        random_start: !a.no_random_start,
        seed: a.seed,
    };
    config.validate()?;
    if a.holdout_every < 2 {
        return Err(Failure::validation("--holdout-every must be at least 2"));
    }
    let model_path = resolve(wd, &a.model);
    let net = at(&model_path, load_model(&model_path))?;
    let data_dir = resolve(wd, &a.data);
    let data = at(&data_dir, load_dataset(&data_dir))?;
    if data.image_shape() != net.spec().input_chw() {
        return Err(Failure::validation("dataset images do not match the model input"));
    }
    let (_, test_set) = data.split_holdout(a.holdout_every);
    let pairs = if config.epsilon == 0.0 {
        eprintln!("warning: --eps 0 allows no perturbation; writing an empty run");
        Vec::new()
    } else {
        attack_dataset(&net, &test_set, &config)?
    };
    let run = Run::new(
        a.model.to_string_lossy().into_owned(),
        a.data.to_string_lossy().into_owned(),
        a.holdout_every,
        config,
        data.class_names().to_vec(),
        data.image_shape(),
        pairs,
    );
    run.save(resolve(wd, &a.out))?;
    println!("{} adversarial pairs from {} test images written to {}", run.pairs.len(), test_set.len(), a.out.display());
    Ok(())
}

fn open_workbench(wd: &Path, run_dir: &Path) -> Result<Workbench, Failure> {
    let run = at(run_dir, Run::load(run_dir))?;
    let model_path = wd.join(&run.manifest.model_path);
    let net = at(&model_path, load_model(&model_path))?;
    Ok(Workbench::new(net, run)?)
}

pub fn precompute(wd: &Path, a: Precompute) -> Result<(), Failure> {
    check_unit("q", a.q, true)?;
    check_unit("t", a.t, true)?;
    let run_dir = resolve(wd, &a.run);
    let wb = open_workbench(wd, &run_dir)?;
    let params = VulnParams::from(&a.vuln);
    let [_, h, w] = wb.run().manifest.image_shape;
    params.validate(h, w)?;
    let linkage = Linkage::from(a.linkage);
    let n = wb.run().pairs.len();
    let started = Instant::now();
    let (mut map_hits, mut tree_hits) = (0usize, 0usize);
    for id in 0..n {
        if store::load_vulnmap(&run_dir, id, &params)?.is_some() {
            map_hits += 1;
        } else {
            store::save_vulnmap(&run_dir, &wb.vulnerability_map(id, params, None)?)?;
        }
        if store::load_dendrogram(&run_dir, id, a.t, linkage)?.is_some() {
            tree_hits += 1;
        } else {
            store::save_dendrogram(&run_dir, id, a.t, linkage, &wb.dendrogram(id, a.t, linkage)?.to_json())?;
        }
        if (id + 1) % 50 == 0 {
            eprintln!("{}/{n} pairs", id + 1);
        }
    }
    let hits = map_hits + tree_hits;
    let total = 2 * n;
    let rate = if total == 0 { 100.0 } else { 100.0 * hits as f64 / total as f64 };
    println!("vulnerability maps: {map_hits}/{n} cached; dendrograms: {tree_hits}/{n} cached");
    println!("cache hits: {hits}/{total} ({rate:.1}%) in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

pub fn serve(wd: &Path, a: Serve) -> Result<(), Failure> {
    let addr: SocketAddr = a
        .addr
        .parse()
        .map_err(|_| Failure::validation(format!("--addr {:?} is not a socket address", a.addr)))?;
    let run_dir = resolve(wd, &a.run);
    let state = at(&run_dir, AppState::open(wd, &run_dir, a.cache_mb << 20))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::io(e.to_string()))?;
    rt.block_on(advscope_server::serve(Arc::new(state), addr))
        .map_err(|e| Failure::io(format!("{addr}: {e}")))
}

pub fn export(wd: &Path, a: Export) -> Result<(), Failure> {
    check_unit("q", a.q, true)?;
    check_unit("t", a.t, true)?;
    let run_dir = resolve(wd, &a.run);
    let wb = open_workbench(wd, &run_dir)?;
    let id = a.pair;
    wb.pair(id)?;
    let side = Side::from(a.side);
    let out = resolve(wd, &a.out);
    let side_name = api::side_name(side);
    let mut written = Vec::new();
    match a.what {
        What::Rf => {
            let body = api::receptive_field(&wb, id, a.neuron, side, a.t)?;
            let (_, image) = wb.receptive_field(id, a.neuron, side, a.t)?;
            let stem = format!("rf_{id}_{}_{side_name}", a.neuron);
            written.push((out.join(format!("{stem}.png")), planar_png(&image.pixels, image.size, image.size)?));
            written.push((out.join(format!("{stem}.json")), serde_json::to_vec_pretty(&body).expect("plain data")));
        }
        What::Vulnmap => {
            let params = VulnParams::from(&a.vuln);
            let [_, h, w] = wb.run().manifest.image_shape;
            params.validate(h, w)?;
            let map = match store::load_vulnmap(&run_dir, id, &params)? {
                Some(m) => m,
                None => wb.vulnerability_map(id, params, None)?,
            };
            let body = api::vulnmap(&map, side, a.q)?;
            let png = encode_png(map.image_w, map.image_h, &heatmap_rgb8(&vulnerability_score(&map, side)))?;
            let stem = format!("vulnmap_{id}_{side_name}");
            written.push((out.join(format!("{stem}.png")), png));
            written.push((out.join(format!("{stem}.json")), serde_json::to_vec_pretty(&body).expect("plain data")));
        }
        What::Dendrogram => {
            let linkage = Linkage::from(a.linkage);
            let tree = match store::load_dendrogram(&run_dir, id, a.t, linkage)? {
                Some(t) => t,
                None => wb.dendrogram(id, a.t, linkage)?.to_json(),
            };
            let body = api::dendrogram(id, a.t, linkage, tree);
            written.push((out.join(format!("dendrogram_{id}.json")), serde_json::to_vec_pretty(&body).expect("plain data")));
        }
    }
    for (path, bytes) in &written {
        write(path, bytes)?;
        println!("{}", path.display());
    }
    Ok(())
}
