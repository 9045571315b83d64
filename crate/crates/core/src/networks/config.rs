use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: [usize; 3],
    pub blocks: Vec<usize>,
    pub widths: Vec<usize>,
    pub strides: Vec<[usize; 3]>,
    /// 1x1-3x3-1x1 blocks with a 4x narrower middle instead of two 3x3 convs.
    pub bottleneck: bool,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            in_channels: 1,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: [2, 2, 2],
            blocks: vec![1, 1],
            widths: vec![8, 16],
            strides: vec![[1, 2, 2], [2, 2, 2]],
            bottleneck: false,
        }
    }

    pub fn full() -> Self {
        EncoderConfig {
            in_channels: 1,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: [2, 2, 2],
            blocks: vec![3, 4, 6, 3],
            widths: vec![256, 512, 1024, 2048],
            strides: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [1, 2, 2]],
            bottleneck: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 || self.widths.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "encoder needs equal, nonzero stage counts: blocks {}, widths {}, strides {}",
                n,
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.blocks.contains(&0) || self.widths.contains(&0) || self.stem_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder block counts and widths must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("stem kernel must be odd".into()));
        }
        if self.stem_stride.contains(&0) || self.strides.iter().any(|s| s.contains(&0)) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.bottleneck && self.widths.iter().any(|w| w % 4 != 0) {
            return Err(Error::Config("bottleneck widths must be multiples of 4".into()));
        }
        Ok(())
    }

    /// Product of the stem and stage strides per axis.
    pub fn output_stride(&self) -> [usize; 3] {
        let mut s = self.stem_stride;
        for st in &self.strides {
            for a in 0..3 {
                s[a] *= st[a];
            }
        }
        s
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Cumulative stride after each stage.
    pub fn level_strides(&self) -> Vec<[usize; 3]> {
        let mut s = self.stem_stride;
        self.strides
            .iter()
            .map(|st| {
                for a in 0..3 {
                    s[a] *= st[a];
                }
                s
            })
            .collect()
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let os = self.output_stride();
        for (a, axis) in ["depth", "height", "width"].iter().enumerate() {
            if spatial[a] % os[a] != 0 {
                return Err(Error::Shape {
                    op: "encode",
                    detail: format!("{axis} {} not divisible by output stride {}", spatial[a], os[a]),
                });
            }
        }
        Ok(())
    }
}

/// Conv-BN-ReLU-Conv head over 1x1x1 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorMode {
    Mlp,
    /// Pass-through predictor with no parameters.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub aspp_channels: usize,
    pub rates: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub projector: HeadConfig,
    pub predictor: HeadConfig,
    pub predictor_mode: PredictorMode,
    pub seg: SegConfig,
}

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            encoder: EncoderConfig::desk(),
            projector: HeadConfig { hidden: 32, out: 16 },
            predictor: HeadConfig { hidden: 32, out: 16 },
            predictor_mode: PredictorMode::Mlp,
            seg: SegConfig {
                aspp_channels: 16,
                rates: [2, 4, 8],
            },
        }
    }

    pub fn full() -> Self {
        NetworkConfig {
            encoder: EncoderConfig::full(),
            projector: HeadConfig { hidden: 4096, out: 256 },
            predictor: HeadConfig { hidden: 4096, out: 256 },
            predictor_mode: PredictorMode::Mlp,
            seg: SegConfig {
                aspp_channels: 256,
                rates: [2, 4, 8],
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown network preset `{other}` (desk, full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let heads = [self.projector.hidden, self.projector.out, self.predictor.hidden, self.predictor.out];
        if heads.contains(&0) || self.seg.aspp_channels == 0 || self.seg.rates.contains(&0) {
            return Err(Error::Config("head widths and ASPP rates must be positive".into()));
        }
        if self.predictor.out != self.projector.out {
            return Err(Error::Config(format!(
                "predictor output {} must equal projector output {}",
                self.predictor.out, self.projector.out
            )));
        }
        Ok(())
    }
}
