//! `dump-moments`: PONO mean and std maps of an image as P5 graymaps.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use moex::augment::Image;
use moex::checkpoint::load_checkpoint;
use moex::data::ChannelStats;
use moex::model::{Params, ResNet, ResNetConfig};
use moex::normalization::{moment_images, DEFAULT_EPS};
use moex::train::{stream_rng, Stream};
use moex::{Shape4, Tensor4};

use crate::run::CheckpointMeta;
use crate::spec::{DataFlags, DataSpec, ExperimentSpec};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Site {
    /// The raw input pixels.
    Input,
    /// The output of the stem Conv-BN-ReLU block.
    Stem,
}

#[derive(Args, Clone, Debug)]
pub struct DumpFlags {
    /// Image file (PNG or PPM/PGM).
    #[arg(long, conflicts_with = "index")]
    pub image: Option<PathBuf>,
    /// Index into the training split selected by the data flags.
    #[arg(long)]
    pub index: Option<usize>,
    #[command(flatten)]
    pub data: DataFlags,
    /// Trained checkpoint providing the stem; a fresh initialisation from
    /// `--seed` is used otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "stem")]
    pub at: Site,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value = "moments")]
    pub out: PathBuf,
}

/// Standardization used without a checkpoint or dataset statistics.
const FALLBACK_STATS: ChannelStats = ChannelStats {
    mean: [127.5; 3],
    std: [64.0; 3],
};

fn load_image(path: &Path) -> Result<Image<u8>, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0u8; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px.0[c];
        }
    }
    Ok(Image::new(h, w, data))
}

fn dataset_image(flags: &DumpFlags, index: usize) -> Result<(Image<u8>, ChannelStats), CliError> {
    let mut spec = ExperimentSpec {
        data: DataSpec {
            source: flags.data.data,
            path: flags.data.data_path.clone(),
            subset: (!flags.data.full).then_some(flags.data.subset),
            seed: flags.data.data_seed,
            synth_train_per_class: flags.data.synth_train,
            synth_test_per_class: 1,
        },
        model: ResNetConfig::default(),
        train: Default::default(),
        stats: None,
        wall_time: false,
        out: flags.out.clone(),
    };
    let (train, _) = spec.load_data()?;
    if index >= train.len() {
        return Err(CliError::Config(format!("--index {index} out of range for {} images", train.len())));
    }
    Ok((train.image(index), spec.stats.expect("filled by load_data")))
}

pub fn cmd_dump_moments(flags: &DumpFlags) -> Result<(), CliError> {
    let (img, name, data_stats) = match (&flags.image, flags.index) {
        (Some(path), _) => {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            (load_image(path)?, stem, None)
        }
        (None, Some(i)) => {
            let (img, stats) = dataset_image(flags, i)?;
            (img, format!("index{i}"), Some(stats))
        }
        (None, None) => return Err(CliError::Config("dump-moments needs --image or --index".into())),
    };
    let shape = Shape4::new(1, 3, img.height, img.width);
    let features: Tensor4<f64> = match flags.at {
        Site::Input => Tensor4::new(shape, img.data.iter().map(|&v| v as f64).collect()).map_err(CliError::from)?,
        Site::Stem => {
            let (net, params, stats) = match &flags.checkpoint {
                Some(path) => {
                    if !path.is_file() {
                        return Err(CliError::MissingFile(path.clone()));
                    }
                    let (params, meta): (Params<f64>, String) = load_checkpoint(path).map_err(CliError::from)?;
                    let meta: CheckpointMeta = serde_json::from_str(&meta)
                        .map_err(|e| CliError::Config(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
                    (ResNet::new(meta.model).map_err(CliError::from)?, params, meta.stats)
                }
                None => {
                    let net = ResNet::new(ResNetConfig::default()).map_err(CliError::from)?;
                    let params = net.init_params::<f64, _>(&mut stream_rng(flags.seed, Stream::Init));
                    (net, params, data_stats.unwrap_or(FALLBACK_STATS))
                }
            };
            let mut x = Tensor4::zeros(shape);
            stats.standardize_into(&img, x.instance_mut(0));
            net.stem_features(&params, &x).map_err(CliError::from)?
        }
    };
    let (mean, std) = moment_images(&features, flags.eps).map_err(CliError::from)?;
    std::fs::create_dir_all(&flags.out).map_err(|e| CliError::Io(flags.out.clone(), e))?;
    for (suffix, m) in [("mean", &mean), ("std", &std)] {
        let path = flags.out.join(format!("{name}_{suffix}.pgm"));
        m.image.save(&path).map_err(|e| CliError::Io(path.clone(), e))?;
        println!("{}: {suffix} range [{:.6}, {:.6}]", path.display(), m.min, m.max);
    }
    Ok(())
}
