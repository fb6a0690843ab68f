//! `tricomp` — compress, run, train, and analyze three-branch models.
//!
//! Exit codes: 0 success, 2 argument error, 3 malformed file, 4 numerical
//! failure, 5 shape/input mismatch, 6 i/o error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tricomp_core::account::{branch_freq_proportion, cost_report};
use tricomp_core::error::Error;
use tricomp_core::io::{
    compress_checkpoint, parse_bmc, parse_fpw, parse_image, serialize_bmc, serialize_image,
    BmcLayer, Image,
};
use tricomp_core::layer::compress_toy;
use tricomp_core::train::{train_toy, TextureStream, TrainConfig};

/// Upsampling factor of the inference pipeline.
const UPSAMPLE: usize = 4;
/// Edge length of the procedural high-resolution training textures.
const TRAIN_TEXTURE_EDGE: usize = 16;

#[derive(Parser)]
#[command(
    name = "tricomp",
    version,
    about = "Three-branch matrix compression toolkit",
    long_about = "Compresses full-precision checkpoints into binarized + low-rank + sparse\n\
                  models, runs 4x super-resolution inference on PPM/PGM images, distills\n\
                  a compressed student from its teacher, and reports parameter/operation\n\
                  costs and per-branch frequency content."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress an FPW0 checkpoint into a BMC1 model.
    ///
    /// Files with three or more layers keep their first and last layers
    /// full precision; everything in between is compressed with
    /// k = sparsity-mult * max(m, n) sparse entries per layer. Prints one
    /// residual line per compressed layer.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long = "sparsity-mult", default_value_t = 2)]
        sparsity_mult: usize,
    },
    /// Run 4x super-resolution on a binary PPM (P6) or PGM (P5) image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Params/OPs cost report of a BMC1 model.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Input dims as c,h,w.
        #[arg(long = "input-dims", default_value = "3,64,64")]
        input_dims: String,
    },
    /// Distill a compressed student from a full-precision teacher on
    /// procedural textures; prints one `iter <n> loss <v>` line per step.
    TrainToy {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the high-frequency share of each branch of one compressed
    /// layer on the given image.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Layer index in the checkpoint layer list.
        #[arg(long)]
        layer: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Format { .. } => 3,
        Error::Numerical(_) => 4,
        Error::Shape(_) | Error::InvalidInput(_) => 5,
        Error::Io(_) => 6,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(Error::Io)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(Error::Io)
}

fn parse_dims(spec: &str) -> Result<(usize, usize, usize), Error> {
    let parts: Vec<&str> = spec.split(',').collect();
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("bad input-dims component '{s}'")))
    };
    match parts.as_slice() {
        [c, h, w] => Ok((parse(c)?, parse(h)?, parse(w)?)),
        _ => Err(Error::InvalidArgument(format!(
            "input-dims must be c,h,w, got '{spec}'"
        ))),
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Compress {
            input,
            out,
            rank,
            sparsity_mult,
        } => {
            let fp = parse_fpw(&read_file(&input)?)?;
            let (bmc, reports) = compress_checkpoint(&fp, rank, sparsity_mult)?;
            write_file(&out, &serialize_bmc(&bmc))?;
            for (i, report) in &reports {
                println!(
                    "layer {i} res_ours {:.6e} res_direct {:.6e}",
                    report.frob_sq_ours, report.frob_sq_direct
                );
            }
            Ok(())
        }
        Cmd::Infer { model, input, out } => {
            let bmc = parse_bmc(&read_file(&model)?)?;
            let net = bmc.to_model(UPSAMPLE)?;
            let img = parse_image(&read_file(&input)?)?;
            let tensor = img.to_tensor();
            let restored = net.forward(&tensor)?;
            let out_img = Image::from_tensor(&restored)?;
            write_file(&out, &serialize_image(&out_img))?;
            Ok(())
        }
        Cmd::Report { model, input_dims } => {
            let dims = parse_dims(&input_dims)?;
            let bmc = parse_bmc(&read_file(&model)?)?;
            let net = bmc.to_model(UPSAMPLE)?;
            let report = cost_report(&net, dims, 1)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Cmd::TrainToy {
            teacher,
            iters,
            seed,
            out,
        } => {
            let fp = parse_fpw(&read_file(&teacher)?)?;
            let teacher_model = fp.to_model(UPSAMPLE)?;
            let (mut student, _) = compress_toy(&teacher_model, 8, 2)?;
            let mut stream = TextureStream::new(
                seed,
                teacher_model.head.in_channels(),
                TRAIN_TEXTURE_EDGE,
                TRAIN_TEXTURE_EDGE,
            );
            let cfg = TrainConfig {
                iterations: iters,
                seed,
                ..TrainConfig::default()
            };
            let trace = train_toy(&mut student, &teacher_model, &mut stream, &cfg)?;
            for (i, loss) in trace.iter().enumerate() {
                println!("iter {i} loss {loss:.6e}");
            }
            let bmc = tricomp_core::io::BmcCheckpoint::from_model(&student);
            write_file(&out, &serialize_bmc(&bmc))?;
            Ok(())
        }
        Cmd::Analyze {
            model,
            input,
            layer,
        } => {
            let bmc = parse_bmc(&read_file(&model)?)?;
            if layer >= bmc.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} out of range ({} layers)",
                    bmc.layers.len()
                )));
            }
            if !matches!(bmc.layers[layer], BmcLayer::Compressed(_)) {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} is full precision; pick a compressed conv layer"
                )));
            }
            let net = bmc.to_model(UPSAMPLE)?;
            let body_index = layer - 1; // list = head, body..., tail
            let img = parse_image(&read_file(&input)?)?;
            let x = net.body_input(&img.to_tensor(), body_index)?;
            let (pb, pl, ps) = branch_freq_proportion(&net.body[body_index], &x)?;
            println!("layer {layer} bmb {pb:.12} lrmb {pl:.12} smb {ps:.12}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
