//! Scaling, external-factor encoding and training-instance assembly.

mod external;
mod instances;
mod scaler;

pub use external::{
    encode_external, external_series, load_holidays, load_weather, read_holidays, read_weather, save_holidays,
    save_weather, ExternalConfig, ExternalFeatures, HolidayCalendar, WeatherRecord, WeatherSource,
    BEIJING_TEMPERATURE_RANGE, BEIJING_WIND_RANGE,
};
pub use instances::{
    build_instances, first_valid_t, instance_at, split_train_val, validate_instance, SequenceConfig, TrainingInstance,
};
pub use scaler::MinMaxScaler;
