use crate::data::ClassLabel;
use crate::error::{Error, Result};

pub const DEFAULT_TI_TOKEN: &str = "<ultrasound>";

/// Radiology-style prompt for a class. In TI mode the learned token takes the
/// place of the word "ultrasound".
pub fn prompt_for_label(label: ClassLabel, ti_mode: bool, ti_token: &str) -> Result<String> {
    let lead = if ti_mode {
        if ti_token.trim().is_empty() {
            return Err(Error::InvalidArgument("TI mode needs a non-empty token".into()));
        }
        ti_token
    } else {
        "ultrasound"
    };
    Ok(match label {
        ClassLabel::Benign => format!("{lead} image of a benign breast lesion"),
        ClassLabel::Malignant => format!("{lead} image of a malignant breast lesion"),
        ClassLabel::Normal => format!("{lead} image of normal breast tissue"),
    })
}
