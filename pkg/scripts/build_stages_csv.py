"""Regenerate the bundled static mapping ``data/stages.csv``.

Names are curated API entry points of common data-science libraries,
grouped by the dspipelines stage they signal. Codes are 1-based positions
in ``data/dspipelines.yaml``.
"""

import csv
import sys
from pathlib import Path

STAGES = {
    1: """read_csv read_excel read_json read_sql read_sql_query read_sql_table read_parquet
        read_pickle read_table read_html read_hdf read_feather read_fwf read_xml
        loadtxt genfromtxt load_iris load_digits load_wine load_breast_cancer
        load_diabetes fetch_openml fetch_california_housing make_classification
        make_regression make_blobs make_moons make_circles load_data urlopen
        urlretrieve get_file image_dataset_from_directory flow_from_directory
        load_dataset ImageFolder DataLoader imread ZipFile""",
    2: """dropna fillna drop drop_duplicates replace astype rename merge concat join pivot
        pivot_table melt get_dummies apply map cut qcut interpolate clip set_index
        reset_index sort_values sort_index reindex stack unstack to_datetime
        to_numeric factorize isnull notnull isna notna train_test_split
        StandardScaler MinMaxScaler RobustScaler Normalizer LabelEncoder
        OneHotEncoder OrdinalEncoder SimpleImputer KNNImputer PolynomialFeatures
        PowerTransformer FunctionTransformer ColumnTransformer FeatureUnion
        CountVectorizer TfidfVectorizer PCA TruncatedSVD SelectKBest
        SelectPercentile RFE SelectFromModel SMOTE RandomOverSampler resample
        shuffle pad_sequences to_categorical Tokenizer word_tokenize
        WordNetLemmatizer ImageDataGenerator Compose ToTensor Resize reshape
        transpose flatten hstack concatenate fit_transform transform
        inverse_transform scale normalize""",
    3: """to_csv to_excel to_json to_sql to_parquet to_pickle to_hdf to_feather to_stata
        to_html savetxt save savez savez_compressed dump dumps save_model
        save_weights HDFStore ExcelWriter joblib_dump write_csv savefig_data""",
    4: """head tail describe info value_counts unique nunique corr cov groupby agg aggregate
        count mean median mode std var quantile skew kurt crosstab hist boxplot
        scatter_matrix pairplot heatmap countplot distplot histplot kdeplot
        violinplot jointplot regplot barplot catplot profile_report ProfileReport
        select_dtypes nlargest nsmallest idxmax idxmin duplicated isin""",
    5: """LogisticRegression LinearRegression Ridge Lasso ElasticNet SGDClassifier
        SGDRegressor Perceptron RidgeClassifier BayesianRidge SVC SVR LinearSVC
        LinearSVR DecisionTreeClassifier DecisionTreeRegressor
        RandomForestClassifier RandomForestRegressor ExtraTreesClassifier
        ExtraTreesRegressor GradientBoostingClassifier GradientBoostingRegressor
        HistGradientBoostingClassifier HistGradientBoostingRegressor
        AdaBoostClassifier BaggingClassifier VotingClassifier StackingClassifier
        KNeighborsClassifier KNeighborsRegressor NearestNeighbors GaussianNB
        MultinomialNB BernoulliNB LinearDiscriminantAnalysis MLPClassifier
        MLPRegressor KMeans DBSCAN AgglomerativeClustering GaussianMixture
        IsolationForest LocalOutlierFactor OneVsRestClassifier MultiOutputClassifier
        CalibratedClassifierCV Pipeline make_pipeline XGBClassifier XGBRegressor
        LGBMClassifier LGBMRegressor CatBoostClassifier Sequential Dense Conv2D
        MaxPooling2D Dropout LSTM GRU Embedding BatchNormalization Model compile add
        Linear Conv2d CrossEntropyLoss Adam SGD ARIMA Prophet OLS""",
    6: """fit partial_fit fit_generator train_on_batch GridSearchCV RandomizedSearchCV
        HalvingGridSearchCV HalvingRandomSearchCV BayesSearchCV cross_validate train
        backward step zero_grad EarlyStopping ModelCheckpoint ReduceLROnPlateau
        LearningRateScheduler optimize minimize fit_resample train_model trainer
        Trainer TrainingArguments""",
    7: """score accuracy_score precision_score recall_score f1_score fbeta_score roc_auc_score
        roc_curve auc precision_recall_curve average_precision_score
        confusion_matrix classification_report log_loss brier_score_loss
        matthews_corrcoef cohen_kappa_score balanced_accuracy_score jaccard_score
        mean_squared_error mean_absolute_error median_absolute_error r2_score
        explained_variance_score mean_squared_log_error
        mean_absolute_percentage_error silhouette_score adjusted_rand_score
        adjusted_mutual_info_score normalized_mutual_info_score cross_val_score
        cross_val_predict learning_curve validation_curve KFold StratifiedKFold
        GroupKFold RepeatedStratifiedKFold LeaveOneOut ShuffleSplit
        StratifiedShuffleSplit TimeSeriesSplit evaluate ConfusionMatrixDisplay
        RocCurveDisplay plot_confusion_matrix""",
    8: """predict predict_proba predict_log_proba decision_function predict_generator
        predict_on_batch fit_predict forecast get_forecast predict_classes
        predict_step inference""",
    9: """feature_importances_ permutation_importance plot_importance partial_dependence
        PartialDependenceDisplay TreeExplainer KernelExplainer DeepExplainer
        Explainer shap_values summary_plot force_plot dependence_plot
        LimeTabularExplainer explain_instance plot_tree export_text export_graphviz
        coef_ get_feature_names_out""",
    10: """plot show figure subplots subplot xlabel ylabel title legend savefig bar barh pie
        imshow xticks yticks grid tight_layout suptitle set_title set_xlabel
        set_ylabel displayHTML display tabulate""",
    11: """save_pretrained push_to_hub export_saved_model SavedModel convert TFLiteConverter
        onnx_export torch_save script trace serve Flask route run_app FastAPI deploy""",
}

TARGET = 404


def main(out: Path) -> None:
    rows, seen = [], set()
    for code, block in STAGES.items():
        for name in block.split():
            if name in seen:
                raise SystemExit(f"duplicate name {name}")
            seen.add(name)
            rows.append((name, code))
    if len(rows) != TARGET:
        raise SystemExit(f"expected {TARGET} names, have {len(rows)}")
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "stage"])
        writer.writerows(rows)


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "pipestages" / "data" / "stages.csv"
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
