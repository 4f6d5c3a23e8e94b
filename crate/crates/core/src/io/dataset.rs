//! Dataset directories: `images/*.ppm`, `labels/*.pgm` and a `manifest.csv`
//! listing `name,height,width` per image.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_pgm, read_ppm, write_atomic, write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::train::LabeledImage;

const HEADER: &str = "name,height,width";

pub fn image_name(index: usize) -> String {
    format!("img_{index:04}")
}

pub fn write_dataset(dir: &Path, data: &[LabeledImage]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = format!("{HEADER}\n");
    for (i, item) in data.iter().enumerate() {
        let name = image_name(i);
        write_ppm(&dir.join("images").join(format!("{name}.ppm")), &item.image)?;
        write_pgm(&dir.join("labels").join(format!("{name}.pgm")), &item.labels)?;
        writeln!(manifest, "{name},{},{}", item.image.height, item.image.width).unwrap();
    }
    write_atomic(&dir.join("manifest.csv"), manifest.as_bytes())
}

/// Names listed in `manifest.csv`, in order.
pub fn dataset_names(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format(format!("{}: expected header {HEADER:?}", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .next()
                .filter(|n| !n.is_empty())
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    dataset_names(dir)?
        .iter()
        .map(|name| {
            let image = read_ppm(&dir.join("images").join(format!("{name}.ppm")))?;
            let labels = read_pgm(&dir.join("labels").join(format!("{name}.pgm")))?;
            if (image.height, image.width) != (labels.height, labels.width) {
                return Err(Error::Dimension(format!("{name}: image and labels differ in size")));
            }
            Ok(LabeledImage { image, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{synth_dataset, SynthConfig};

    #[test]
    fn dataset_round_trip() {
        let data = synth_dataset(&SynthConfig { size: 64, num_images: 2, patch: 16, cue_scale: 24, ..SynthConfig::default() })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        assert_eq!(
            std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap(),
            "name,height,width\nimg_0000,64,64\nimg_0001,64,64\n"
        );
        assert!(read_dataset(&dir.path().join("missing")).is_err());
    }
}
