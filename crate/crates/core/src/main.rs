use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use camkit::cam::compute_cam;
use camkit::eval::{self, LocMethod};
use camkit::features;
use camkit::gapnet::{build_gapnet, train, ArchConfig, PoolingKind, TrainConfig};
use camkit::gradsuite;
use camkit::io::{self, BoxRow};
use camkit::localize::ProposalMode;
use camkit::synthdata::{generate_dataset, Sample, SynthConfig};
use camkit::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "camkit", version, about = "GAP networks, class activation maps and weakly-supervised localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        per_class: usize,
        /// Image side in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a network on a dataset's training split
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "gap")]
        head: PoolingKind,
        #[arg(long)]
        seed: u64,
        /// Defaults to the built-in recipe
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Base learning rate; defaults to the built-in recipe
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Check every layer's gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute a class activation map for one image
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: ImageInput,
        /// Class to map; defaults to the predicted class
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out_png: Option<PathBuf>,
        #[arg(long)]
        out_tensor: Option<PathBuf>,
    },
    /// Propose boxes for one image, or every test image of a dataset
    Localize {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: ImageInput,
        #[arg(long, default_value = "plain")]
        mode: ProposalMode,
        #[arg(long, default_value = "cam")]
        method: LocMethod,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Score classification and localization on a dataset's test split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cam")]
        method: LocMethod,
        #[arg(long, default_value = "plain")]
        mode: ProposalMode,
        /// Summary CSV
        #[arg(long)]
        report: PathBuf,
        /// Optional per-sample CSV
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train a linear hinge head on frozen pooled features
    Features {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// New label of each original class, e.g. 0,0,1,1,2
        #[arg(long)]
        relabel: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = features::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rank units for a class and write their top patches
    Units {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rank by a linear head's weights instead of the classifier's
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_units: usize,
        #[arg(long, default_value_t = 5)]
        top_images: usize,
    },
}

#[derive(Args)]
struct ImageInput {
    /// Image tensor file (H×W or 1×H×W)
    #[arg(long, conflicts_with = "data")]
    image: Option<PathBuf>,
    /// Dataset directory; reads the test split
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test-split index when reading from a dataset
    #[arg(long, requires = "data")]
    index: Option<usize>,
}

impl ImageInput {
    /// `(image_id, image, label)` for each selected image.
    fn load(&self) -> Result<Vec<(usize, Tensor<f32>, Option<Sample>)>> {
        match (&self.image, &self.data) {
            (Some(path), _) => {
                let t = io::load_tensor(path)?;
                let t = match *t.shape() {
                    [h, w] => t.reshape(&[1, h, w])?,
                    _ => t,
                };
                Ok(vec![(0, t, None)])
            }
            (None, Some(dir)) => {
                let test = io::load_split(&io::split_paths(dir).1)?;
                let pick = |i: usize| -> Result<(usize, Tensor<f32>, Option<Sample>)> {
                    let s = test
                        .get(i)
                        .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside {} test samples", test.len())))?;
                    Ok((i, s.image.clone(), Some(s.clone())))
                };
                match self.index {
                    Some(i) => Ok(vec![pick(i)?]),
                    None => (0..test.len()).map(pick).collect(),
                }
            }
            (None, None) => Err(Error::InvalidArgument("pass --image or --data".into())),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_file(path, text.as_bytes())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            seed,
            per_class,
            size,
        } => {
            let cfg = SynthConfig {
                size,
                ..SynthConfig::default()
            };
            let data = generate_dataset(per_class, seed, &cfg)?;
            io::save_dataset(&out, &data)?;
            println!("wrote {} train and {} test samples to {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Train {
            data,
            out,
            head,
            seed,
            epochs,
            batch_size,
            lr,
        } => {
            let ds = io::load_dataset(&data)?;
            let [c, h, w] = *ds.train[0].image.shape() else {
                return Err(Error::InvalidArgument("dataset images must be C×H×W".into()));
            };
            let mut arch = ArchConfig::desk(head);
            arch.input = (c, h, w);
            let mut net = build_gapnet(&arch, seed)?;
            let mut cfg = TrainConfig::default();
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.schedule.base = lr.unwrap_or(cfg.schedule.base);
            for m in train(&mut net, &ds.train, &cfg, seed)? {
                println!("epoch {:>3}  lr {:.4}  loss {:.4}  acc {:.4}", m.epoch, m.lr, m.loss, m.accuracy);
            }
            let correct = ds
                .test
                .iter()
                .map(|s| Ok(usize::from(net.forward(&s.image)?.predicted() == s.label)))
                .sum::<Result<usize>>()?;
            println!("held-out accuracy {:.4}", correct as f64 / ds.test.len() as f64);
            io::save_checkpoint(&out, &net)?;
        }
        Command::Gradcheck { instances, seed } => {
            let checks = gradsuite::run_gradient_suite(instances, seed)?;
            let mut ok = true;
            for c in &checks {
                println!(
                    "{:<18} {:>3} instances  max rel err {:.3e}  {}",
                    c.name,
                    c.instances,
                    c.max_rel_err,
                    if c.passed() { "ok" } else { "FAIL" }
                );
                ok &= c.passed();
            }
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "gradient check exceeded tolerance {:e}",
                    gradsuite::TOLERANCE
                )));
            }
        }
        Command::Cam {
            ckpt,
            input,
            class,
            out_png,
            out_tensor,
        } => {
            let net = io::load_checkpoint(&ckpt)?;
            let [_, h, w] = net.input_shape();
            for (_, image, _) in input.load()?.into_iter().take(1) {
                let trace = net.forward(&image)?;
                let class = class.unwrap_or_else(|| trace.predicted());
                let cam = compute_cam(&trace, net.classifier(), class)?.upsample(h, w)?;
                let up = cam.upsampled.as_ref().expect("upsampled");
                if let Some(p) = &out_tensor {
                    io::save_tensor(p, &cam.raw)?;
                }
                if let Some(p) = &out_png {
                    io::write_file(p, &io::render_overlay(&image, up, io::DEFAULT_ALPHA)?)?;
                }
                println!("class {class}  score {:.6}  cam max {:.6}", trace.logits.data()[class], cam.max_val);
            }
        }
        Command::Localize {
            ckpt,
            input,
            mode,
            method,
            out_csv,
        } => {
            let net = io::load_checkpoint(&ckpt)?;
            let mut rows = Vec::new();
            for (id, image, _) in input.load()? {
                // the label only matters for the gt-known box, unused here
                let p = eval::predict(&net, &image, 0, method, mode)?;
                rows.extend(p.proposals.iter().map(|q| BoxRow::from_proposal(id, q)));
            }
            write_text(&out_csv, &io::write_boxes(&rows))?;
            println!("wrote {} boxes to {}", rows.len(), out_csv.display());
        }
        Command::Eval {
            ckpt,
            data,
            method,
            mode,
            report,
            records,
        } => {
            let net = io::load_checkpoint(&ckpt)?;
            let test = io::load_split(&io::split_paths(&data).1)?;
            let name = format!("{}-{}", net.pooling().as_str(), method.as_str());
            let r = eval::evaluate(&name, &net, &test, method, mode)?;
            let reports = [r];
            print!("{}", eval::reports_table(&reports));
            write_text(&report, &eval::reports_csv(&reports))?;
            if let Some(p) = records {
                write_text(&p, &reports[0].records_csv())?;
            }
        }
        Command::Features {
            ckpt,
            data,
            relabel,
            out,
            lambda,
            epochs,
            seed,
        } => {
            let net = io::load_checkpoint(&ckpt)?;
            let ds = io::load_dataset(&data)?;
            let map = features::parse_relabel(&relabel)?;
            let head = features::fit_relabeled_head(&net, &ds.train, &map, lambda, epochs, seed)?;
            let (acc, gk) = features::score_head(&net, &head, &ds.test, &map)?;
            println!("held-out accuracy {acc:.4}  gt-known localization {gk:.4}");
            io::save_head(&out, &head)?;
        }
        Command::Units {
            ckpt,
            class,
            data,
            out,
            head,
            top_units,
            top_images,
        } => {
            let net = io::load_checkpoint(&ckpt)?;
            let weights = match head {
                Some(p) => io::load_head(&p)?.weights,
                None => net.classifier().clone(),
            };
            let test = io::load_split(&io::split_paths(&data).1)?;
            let images: Vec<&Tensor<f32>> = test.iter().map(|s| &s.image).collect();
            let r = features::rank_units(&net, &weights, class, &images, top_units, top_images)?;
            let mut csv = String::from("unit,weight,image_index,activation,x_min,y_min,x_max,y_max\n");
            for (unit, patches) in &r.patches {
                let wt = r.weights[r.units.iter().position(|u| u == unit).expect("ranked unit")];
                for p in patches {
                    let b = p.region;
                    csv.push_str(&format!(
                        "{unit},{wt:?},{},{:?},{},{},{},{}\n",
                        p.image_index, p.activation, b.x_min, b.y_min, b.x_max, b.y_max
                    ));
                }
            }
            let rows: Vec<Vec<&Tensor<f32>>> = r.patches.iter().map(|(_, ps)| ps.iter().map(|p| &p.crop).collect()).collect();
            io::write_file(&out.join(format!("class{class}_units.png")), &io::contact_sheet(&rows)?)?;
            write_text(&out.join(format!("class{class}_units.csv")), &csv)?;
            println!("top units for class {class}: {:?}", &r.units[..top_units.min(r.units.len())]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("camkit: {e}");
            ExitCode::FAILURE
        }
    }
}
