//! Training examples and the derived inputs both stages consume.

use ndarray::Array3;

use crate::data::{label, onehot_encode, person_representation, KeypointSet, ParseLabelMap, PersonRepresentation, RgbImage, SegMap};
use crate::error::{Result, TryonError};
use crate::masking::{mask_person_image, mask_segmentation, MaskedSegMap};

/// One person image paired with its product-shot garment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub person: RgbImage,
    pub cloth: RgbImage,
    pub parse: ParseLabelMap,
    pub keypoints: KeypointSet,
    /// The person image restricted to top-clothes pixels (zero elsewhere).
    pub worn_cloth: RgbImage,
}

impl TrainingSample {
    /// Validate geometries and derive the worn-garment crop.
    pub fn new(person: RgbImage, cloth: RgbImage, parse: ParseLabelMap, keypoints: KeypointSet) -> Result<Self> {
        let g = person.geometry();
        if cloth.geometry() != g || parse.geometry() != g {
            return Err(TryonError::ShapeMismatch(format!(
                "person {:?}, cloth {:?}, parse {:?}",
                g,
                cloth.geometry(),
                parse.geometry()
            )));
        }
        keypoints.validate(g)?;
        let worn_cloth = worn_cloth(&person, &parse);
        Ok(TrainingSample { person, cloth, parse, keypoints, worn_cloth })
    }
}

/// Keep only top-clothes pixels of `person`.
pub fn worn_cloth(person: &RgbImage, parse: &ParseLabelMap) -> RgbImage {
    let mut d: Array3<f64> = person.data().clone();
    for ((r, c), &l) in parse.labels().indexed_iter() {
        if l != label::TOP_CLOTHES {
            for ch in 0..3 {
                d[[ch, r, c]] = 0.0;
            }
        }
    }
    RgbImage::new(d).expect("subset of a valid image")
}

/// A sample with every derived network input computed once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: TrainingSample,
    pub seg: SegMap,
    pub masked: MaskedSegMap,
    pub rep: PersonRepresentation,
    pub masked_person: RgbImage,
}

impl PreparedSample {
    pub fn new(sample: TrainingSample, pad: usize) -> Result<Self> {
        let seg = onehot_encode(&sample.parse);
        let masked = mask_segmentation(&seg, &sample.keypoints, pad)?;
        let rep = person_representation(&seg, &sample.keypoints)?;
        let masked_person = mask_person_image(&sample.person, &seg, &masked.region)?;
        Ok(PreparedSample { sample, seg, masked, rep, masked_person })
    }
}
